"""
Scoring samples by the weight change they cause
===============================================

Each sample gets one optimizer step on a copy of the base model. Samples that
move the weights a lot are the ones the model finds surprising, and on this
synthetic corpus those are the injected junk samples.
"""

import numpy as np

from resofilter import analysis, diffscore
from resofilter import dataio as D
from resofilter import filterpipe as F
from resofilter import model as M
from resofilter import train as T

# A corpus of arithmetic word problems with some junk mixed in, plus a
# separate clean corpus to pretrain the base model on.
corpus = D.synth_corpus(60, 15, seed=0)
boot = D.synth_corpus(80, 0, seed=1)
vocab = D.Vocab.from_samples(corpus + boot)
print(corpus[0].instruction, "->", corpus[0].response)
print(next(s for s in corpus if s.meta["label"] == "dirty").instruction)

cfg = M.ModelConfig(vocab_size=len(vocab), d_model=32, n_heads=2, n_layers=3, d_ff=64, max_seq_len=96)
data = D.tokenize_dataset(corpus, vocab, max_seq_len=96)
boot_t = D.tokenize_dataset(boot, vocab, max_seq_len=96)

base = T.train(M.init(cfg), boot_t, T.OptimizerConfig(lr=1e-3),
               T.TrainConfig(epochs=2, batch_size=8, shuffle=True))

# Score: mean |dW| of the MLP up-projection over the last three blocks.
# Under AdamW the first step is close to lr per entry, so differences are small.
spec = F.FilterSpec(retain_fraction=0.5, layer_window=3, module="w_up", stat="mean_abs")
scores = diffscore.score_dataset(base, data, spec)
dirty = D.labels_of(corpus)
values = np.array([e.score for e in scores])
print("mean score clean %.6e  dirty %.6e" % (values[~dirty].mean(), values[dirty].mean()))
print("AUC dirty vs clean: %.3f" % analysis.auc(values, dirty))

# Keep the lower-change half.
kept = F.select(scores, spec)
print("kept %d of %d, dirty among kept: %d" % (len(kept), len(data), dirty[kept].sum()))

# The per-cell table lets other statistics be tried without re-probing.
for stat in ("std", "p99", "cosine"):
    alt = diffscore.rereduce(scores, F.FilterSpec(layer_window=3, stat=stat), cfg.n_layers)
    print("%-8s AUC %.3f" % (stat, analysis.auc([e.score for e in alt], dirty)))
