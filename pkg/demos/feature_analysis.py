"""
What high-change samples look like
==================================

Split the scored corpus into the top and bottom slices by score and a random
slice of the same size, then compare simple surface features.
"""

from resofilter import analysis, diffscore
from resofilter import dataio as D
from resofilter import filterpipe as F
from resofilter import model as M
from resofilter import train as T

corpus = D.synth_corpus(80, 20, seed=3)
boot = D.synth_corpus(80, 0, seed=4)
vocab = D.Vocab.from_samples(corpus + boot)
cfg = M.ModelConfig(vocab_size=len(vocab), d_model=32, n_heads=2, n_layers=3, d_ff=64, max_seq_len=96)
data = D.tokenize_dataset(corpus, vocab, max_seq_len=96)
base = T.train(M.init(cfg), D.tokenize_dataset(boot, vocab, max_seq_len=96),
               T.OptimizerConfig(lr=1e-3), T.TrainConfig(epochs=2, batch_size=8, shuffle=True))

scores = diffscore.score_dataset(base, data, F.FilterSpec(layer_window=3))
reports = analysis.report(data, scores, 0.1, embed=analysis.embedding_mean(base))

print(f"{'metric':<24}" + "".join(f"{c:>12}" for c in analysis.CLASSES))
for r in reports:
    print(f"{r.metric:<24}" + "".join(f"{r.mean[c]:>12.3f}" for c in analysis.CLASSES))
