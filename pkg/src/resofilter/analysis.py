"""Surface features that separate high-change samples from low-change ones.

Three classes are compared: the top fraction by score ("high_diff"), the
bottom fraction ("low_diff"), and a seeded random sample of the same size.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numcore
from ._fileio import atomic_write_text
from .errors import ConfigError, DataError, DomainError

CLASSES = ("high_diff", "low_diff", "random")
METRICS = ("token_length", "avg_token_frequency", "unique_token_ratio", "intra_class_similarity")
N_BINS = 20


@dataclass
class HistogramReport:
    metric: str
    edges: list[float]
    counts: dict[str, list[int]]
    mean: dict[str, float]
    median: dict[str, float]

    def to_dict(self) -> dict:
        return {"metric": self.metric, "edges": self.edges, "counts": self.counts,
                "mean": self.mean, "median": self.median}


def class_size(n: int, fraction: float) -> int:
    return int(math.ceil(n * fraction))


def split_classes(scores, fraction: float, rng_seed: int = 0) -> dict[str, list[int]]:
    """Top / bottom ``ceil(n * fraction)`` indices by score, plus a random draw of that size.

    Ties are broken by smaller index first in both directions' sort keys.
    """
    if not 0.0 < fraction <= 0.5:
        raise ConfigError(f"fraction must lie in (0, 0.5], got {fraction}")
    scores = list(scores)
    n = len(scores)
    k = class_size(n, fraction)
    if n < 2 or 2 * k > n:
        raise ConfigError(f"dataset of {n} samples too small for fraction {fraction}")
    asc = sorted(scores, key=lambda e: (e.score, e.index))
    desc = sorted(scores, key=lambda e: (-e.score, e.index))
    all_idx = sorted(e.index for e in scores)
    pick = numcore.make_rng(rng_seed).choice(n, size=k, replace=False)
    return {
        "high_diff": sorted(e.index for e in desc[:k]),
        "low_diff": sorted(e.index for e in asc[:k]),
        "random": sorted(all_idx[int(i)] for i in pick),
    }


def token_length(sample) -> int:
    return int(len(sample.token_ids))


def corpus_counts(samples) -> Counter:
    counts = Counter()
    for s in samples:
        counts.update(int(t) for t in s.token_ids)
    return counts


def avg_token_frequency(sample, counts) -> float:
    """Sum of corpus-wide counts of the sample's tokens over the sample length."""
    ids = [int(t) for t in sample.token_ids]
    if not ids:
        raise DomainError("empty sample")
    for t in ids:
        if t not in counts:
            raise DataError(f"token {t} absent from corpus counts")
    return sum(counts[t] for t in ids) / len(ids)


def unique_token_ratio(sample) -> float:
    ids = np.asarray(sample.token_ids)
    if ids.size == 0:
        raise DomainError("empty sample")
    return np.unique(ids).size / ids.size


def intra_class_similarity(class_samples, embed) -> list[float]:
    """For each sample, mean cosine similarity to every other sample in the class."""
    vecs = [np.asarray(embed(s), dtype=np.float64) for s in class_samples]
    n = len(vecs)
    if n < 2:
        raise ConfigError("class needs at least two samples")
    sim = np.ones((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            sim[i, j] = sim[j, i] = numcore.cosine_similarity(vecs[i], vecs[j])
    return [float((sim[i].sum() - sim[i, i]) / (n - 1)) for i in range(n)]


def embedding_mean(params):
    """Embed a sample as the mean token-embedding row over its instruction tokens."""
    table = params["tok_emb"]

    def embed(sample):
        ids = sample.query_ids
        if ids.size == 0:
            ids = sample.token_ids
        return table[ids].mean(axis=0)

    return embed


def histogram(metric: str, per_class: dict[str, list[float]], bins: int = N_BINS) -> HistogramReport:
    pooled = np.concatenate([np.asarray(v, dtype=np.float64) for v in per_class.values()])
    lo, hi = float(pooled.min()), float(pooled.max())
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    counts, mean, median = {}, {}, {}
    for name, vals in per_class.items():
        v = np.asarray(vals, dtype=np.float64)
        counts[name] = [int(c) for c in np.histogram(v, bins=edges)[0]]
        mean[name] = float(np.mean(v))
        median[name] = float(np.median(v))
    return HistogramReport(metric, [float(e) for e in edges], counts, mean, median)


def report(dataset, scores, fraction: float, embed=None, rng_seed: int = 0) -> list[HistogramReport]:
    """Four histogram reports (one per metric), each over the three classes.

    ``dataset`` is the tokenized corpus indexed by score-entry index; ``embed``
    maps a tokenized sample to a vector (e.g. :func:`embedding_mean`).
    """
    dataset = list(dataset)
    scores = list(scores)
    if sorted(e.index for e in scores) != list(range(len(dataset))):
        raise DataError("scores must cover every dataset index exactly once")
    if embed is None:
        raise ConfigError("an embedding function is required for intra-class similarity")
    classes = split_classes(scores, fraction, rng_seed)
    counts = corpus_counts(dataset)
    values = {m: {} for m in METRICS}
    for name in CLASSES:
        members = [dataset[i] for i in classes[name]]
        values["token_length"][name] = [token_length(s) for s in members]
        values["avg_token_frequency"][name] = [avg_token_frequency(s, counts) for s in members]
        values["unique_token_ratio"][name] = [unique_token_ratio(s) for s in members]
        values["intra_class_similarity"][name] = intra_class_similarity(members, embed)
    return [histogram(m, values[m]) for m in METRICS]


def report_to_dict(reports, fraction: float, sizes: dict | None = None) -> dict:
    return {"fraction": fraction, "class_sizes": sizes,
            "metrics": {r.metric: r.to_dict() for r in reports}}


def write_report(reports, path, fraction: float, csv_dir=None) -> None:
    sizes = {c: sum(reports[0].counts[c]) for c in CLASSES}
    atomic_write_text(path, json.dumps(report_to_dict(reports, fraction, sizes), indent=2) + "\n")
    if csv_dir is not None:
        for r in reports:
            lines = ["bin_lo,bin_hi," + ",".join(CLASSES)]
            for b in range(len(r.edges) - 1):
                row = [repr(r.edges[b]), repr(r.edges[b + 1])] + [str(r.counts[c][b]) for c in CLASSES]
                lines.append(",".join(row))
            atomic_write_text(Path(csv_dir) / f"{r.metric}.csv", "\n".join(lines) + "\n")


def auc(scores, positive) -> float:
    """Area under the ROC curve via the Mann-Whitney statistic (ties count one half)."""
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positive, dtype=bool)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise DomainError("AUC needs both positive and negative samples")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(s.size)
    sorted_s = s[order]
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))
