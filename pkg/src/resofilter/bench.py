"""End-to-end desk-scale experiment on a labelled synthetic corpus.

One run: generate a corpus with injected dirty samples, pretrain a base model
on a separate clean corpus, score every sample, then fine-tune the base on the
lowest-change half and on a random half and compare held-out clean loss.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from . import analysis
from . import dataio as D
from . import diffscore
from . import filterpipe as F
from . import model as M
from . import numcore
from . import train as T


@dataclass(frozen=True)
class BenchConfig:
    n_clean: int = 400
    n_dirty: int = 100
    n_bootstrap: int = 400
    n_heldout: int = 100
    retain: float = 0.5
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 4
    d_ff: int = 128
    max_seq_len: int = 128
    pretrain_lr: float = 1e-3
    pretrain_epochs: int = 2
    finetune_lr: float = 1e-3
    finetune_epochs: int = 2
    batch_size: int = 8
    probe_kind: str = "adamw"
    probe_lr: float = 1e-5
    analysis_fraction: float = 0.1
    style: str = D.TURN_MARKERS


def run(seed: int, cfg: BenchConfig = BenchConfig(), workers: int = 1) -> tuple[dict, dict]:
    """Returns ``(report, timings)``; the report is a pure function of seed and config."""
    timings = {}
    clock = time.perf_counter()

    def lap(name):
        nonlocal clock
        now = time.perf_counter()
        timings[name] = now - clock
        clock = now

    corpus = D.synth_corpus(cfg.n_clean, cfg.n_dirty, seed)
    boot = D.synth_corpus(cfg.n_bootstrap, 0, seed + 1000)
    held = D.synth_corpus(cfg.n_heldout, 0, seed + 2000)
    vocab = D.Vocab.from_samples(corpus + boot + held)

    def tok(samples):
        return D.tokenize_dataset(samples, vocab, cfg.style, cfg.max_seq_len)

    data, boot_t, held_t = tok(corpus), tok(boot), tok(held)
    dirty = D.labels_of(corpus)
    lap("synth")

    mcfg = M.ModelConfig(vocab_size=len(vocab), d_model=cfg.d_model, n_heads=cfg.n_heads,
                         n_layers=cfg.n_layers, d_ff=cfg.d_ff, max_seq_len=cfg.max_seq_len, seed=seed)
    init = M.init(mcfg.validate())
    base = T.train(init, boot_t, T.OptimizerConfig(lr=cfg.pretrain_lr),
                   T.TrainConfig(epochs=cfg.pretrain_epochs, batch_size=cfg.batch_size,
                                 shuffle=True, seed=seed))
    lap("pretrain")

    spec = F.FilterSpec(retain_fraction=cfg.retain, layer_window=min(3, cfg.n_layers))
    probe_opt = T.OptimizerConfig(kind=cfg.probe_kind, lr=cfg.probe_lr)
    scores = diffscore.score_dataset(base, data, spec, probe_opt, workers=workers)
    score_values = np.array([e.score for e in scores])
    lap("score")

    kept = F.select(scores, spec)
    pick = numcore.make_rng(seed + 3000).choice(len(data), size=len(kept), replace=False)
    random_kept = sorted(int(i) for i in pick)

    ft_opt = T.OptimizerConfig(lr=cfg.finetune_lr)
    ft_cfg = T.TrainConfig(epochs=cfg.finetune_epochs, batch_size=cfg.batch_size, shuffle=False)
    tuned_reso = T.train(base, F.apply(data, kept), ft_opt, ft_cfg)
    tuned_rand = T.train(base, F.apply(data, random_kept), ft_opt, ft_cfg)
    lap("finetune")

    reports = analysis.report(data, scores, cfg.analysis_fraction,
                              embed=analysis.embedding_mean(base), rng_seed=seed)
    means = {r.metric: r.mean for r in reports}
    report = {
        "seed": seed,
        "retain": cfg.retain,
        "auc": analysis.auc(score_values, dirty),
        "loss_init": T.eval_loss(init, held_t),
        "loss_base": T.eval_loss(base, held_t),
        "loss_resofilter": T.eval_loss(tuned_reso, held_t),
        "loss_random": T.eval_loss(tuned_rand, held_t),
        "dirty_kept_resofilter": int(dirty[kept].sum()),
        "dirty_kept_random": int(dirty[random_kept].sum()),
        "n_kept": len(kept),
        "analysis_means": means,
        "config": asdict(cfg),
        "seeds": {"corpus": seed, "bootstrap": seed + 1000, "heldout": seed + 2000,
                  "random_arm": seed + 3000, "model_init": seed},
    }
    lap("evaluate")
    return report, timings


def passes(report: dict, auc_min: float = 0.90) -> dict[str, bool]:
    """Per-seed checks of the directional criteria."""
    m = report["analysis_means"]
    return {
        "auc": report["auc"] >= auc_min,
        "loss": report["loss_resofilter"] <= report["loss_random"],
        "features": (m["token_length"]["high_diff"] < m["token_length"]["low_diff"]
                     and m["unique_token_ratio"]["high_diff"] > m["unique_token_ratio"]["low_diff"]),
    }
