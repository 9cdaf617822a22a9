"""Per-sample weight-change statistics and their reduction to one score.

For every sample the base model takes one probe update on that sample alone.
Each scored matrix ``(layer, module)`` then gets a row of statistics:

* ``mean_abs``, ``mean_signed``, ``std``: over the entries of the update ``dW``
* ``p90``, ``p95``, ``p99``: percentiles of ``|dW|``
* ``cosine``, ``pearson``: flattened tuned weights against flattened base weights

The scalar score averages one statistic of one module over a layer window.
Cosine and Pearson are stored as ``1 - mean`` so every statistic sorts the
same way: larger score, larger change.
"""

from __future__ import annotations

import json
import multiprocessing as mp
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import model as M
from . import numcore
from ._fileio import atomic_write_text
from .errors import ConfigError, DataError, ResoFilterError
from .filterpipe import STATS, FilterSpec
from .train import OptimizerConfig, probe

SIMILARITY_STATS = ("cosine", "pearson")


class ScoringError(ResoFilterError):
    def __init__(self, index: int, cause: Exception):
        super().__init__(f"scoring sample {index} failed: {cause}")
        self.index = index


@dataclass
class DiffRecord:
    sample_index: int
    n_layers: int
    # (layer, module) -> {stat name: value}
    per_cell: dict
    probe_loss: float


@dataclass
class ScoreEntry:
    index: int
    score: float
    stat: str = "mean_abs"
    module: str = "w_up"
    layer_window: tuple[int, int] = (0, 0)
    probe_loss: float = float("nan")
    per_cell: dict | None = None


def cell_stats(delta: np.ndarray, before: np.ndarray, after: np.ndarray) -> dict[str, float]:
    mag = np.abs(delta).ravel()
    return {
        "mean_abs": numcore.mean_abs(delta),
        "mean_signed": float(np.mean(delta)),
        "std": numcore.std(delta),
        "p90": numcore.percentile(mag, 0.90),
        "p95": numcore.percentile(mag, 0.95),
        "p99": numcore.percentile(mag, 0.99),
        "cosine": numcore.cosine_similarity(after, before),
        "pearson": numcore.pearson(after, before),
    }


def score_sample(base: M.ParamStore, sample, spec: FilterSpec | None = None,
                 opt: OptimizerConfig | None = None, probe_steps: int = 1) -> DiffRecord:
    """Probe ``base`` on one sample and summarise the change of every scored matrix."""
    opt = opt or OptimizerConfig()
    if spec is not None:
        spec.validate()
        spec.layers(base.config.n_layers)
    loss, tuned, deltas = probe(base, sample, opt, probe_steps)
    per_cell = {}
    for layer in range(base.config.n_layers):
        for module in M.SCORED_MODULES:
            key = M.layer_key(layer, module)
            per_cell[(layer, module)] = cell_stats(deltas[key], base[key], tuned[key])
    return DiffRecord(sample.source_index, base.config.n_layers, per_cell, loss)


def _reduce_cells(per_cell, n_layers: int, spec: FilterSpec) -> tuple[float, tuple[int, int]]:
    layers = spec.layers(n_layers)
    try:
        values = [per_cell[(layer, spec.module)][spec.stat] for layer in layers]
    except KeyError as e:
        raise ConfigError(f"record lacks cell/statistic {e}") from None
    mean = float(np.mean(values))
    score = 1.0 - mean if spec.stat in SIMILARITY_STATS else mean
    return score, (layers[0], layers[-1])


def reduce(record: DiffRecord, spec: FilterSpec) -> ScoreEntry:
    spec.validate()
    score, window = _reduce_cells(record.per_cell, record.n_layers, spec)
    return ScoreEntry(record.sample_index, score, spec.stat, spec.module, window,
                      record.probe_loss, record.per_cell)


def rereduce(entries, spec: FilterSpec, n_layers: int) -> list[ScoreEntry]:
    """Re-score persisted entries under another statistic/module/window, no probing."""
    spec.validate()
    out = []
    for e in entries:
        if e.per_cell is None:
            raise ConfigError(f"entry {e.index} carries no per-cell statistics")
        score, window = _reduce_cells(e.per_cell, n_layers, spec)
        out.append(ScoreEntry(e.index, score, spec.stat, spec.module, window, e.probe_loss, e.per_cell))
    return out


# -- dataset scoring ---------------------------------------------------------

_WORKER: dict = {}


def _worker_init(base, data, spec, opt, probe_steps):
    _WORKER.update(base=base, data=data, spec=spec, opt=opt, probe_steps=probe_steps)


def _score_one(i: int) -> ScoreEntry:
    w = _WORKER
    try:
        rec = score_sample(w["base"], w["data"][i], w["spec"], w["opt"], w["probe_steps"])
        entry = reduce(rec, w["spec"])
    except Exception as e:  # noqa: BLE001 - re-raised with the failing index
        raise ScoringError(i, e) from e
    entry.index = i
    return entry


def score_dataset(base: M.ParamStore, data, spec: FilterSpec | None = None,
                  opt: OptimizerConfig | None = None, workers: int = 1,
                  probe_steps: int = 1) -> list[ScoreEntry]:
    """One entry per sample, in sample order, identical for any worker count."""
    spec = (spec or FilterSpec()).validate()
    opt = (opt or OptimizerConfig()).validate()
    data = list(data)
    if not data:
        raise ConfigError("nothing to score")
    spec.layers(base.config.n_layers)
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    if workers == 1:
        _worker_init(base, data, spec, opt, probe_steps)
        try:
            return [_score_one(i) for i in range(len(data))]
        finally:
            _WORKER.clear()
    methods = mp.get_all_start_methods()
    ctx = mp.get_context("fork" if "fork" in methods else "spawn")
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx, initializer=_worker_init,
                             initargs=(base, data, spec, opt, probe_steps)) as pool:
        chunk = max(1, len(data) // (4 * workers))
        return list(pool.map(_score_one, range(len(data)), chunksize=chunk))


# -- score files -------------------------------------------------------------

def entry_to_dict(e: ScoreEntry) -> dict:
    d = {
        "index": int(e.index),
        "score": float(e.score),
        "stat": e.stat,
        "module": e.module,
        "layer_window": [int(e.layer_window[0]), int(e.layer_window[1])],
        "probe_loss": float(e.probe_loss),
    }
    if e.per_cell is not None:
        d["per_cell"] = {f"{layer}.{module}": {k: float(v) for k, v in stats.items()}
                         for (layer, module), stats in e.per_cell.items()}
    return d


def entry_from_dict(d: dict) -> ScoreEntry:
    per_cell = None
    if d.get("per_cell") is not None:
        per_cell = {}
        for key, stats in d["per_cell"].items():
            layer, module = key.split(".", 1)
            per_cell[(int(layer), module)] = dict(stats)
    return ScoreEntry(int(d["index"]), float(d["score"]), d["stat"], d["module"],
                      tuple(d["layer_window"]), float(d["probe_loss"]), per_cell)


def dumps_scores(entries) -> str:
    return "".join(json.dumps(entry_to_dict(e)) + "\n" for e in entries)


def save_scores(entries, path) -> None:
    atomic_write_text(path, dumps_scores(entries))


def load_scores(path) -> list[ScoreEntry]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(entry_from_dict(json.loads(line)))
                except (json.JSONDecodeError, KeyError, ValueError) as e:
                    raise DataError(f"{path}: line {lineno}: bad score record ({e})") from None
    return out


__all__ = [
    "STATS",
    "DiffRecord",
    "ScoreEntry",
    "ScoringError",
    "cell_stats",
    "dumps_scores",
    "load_scores",
    "reduce",
    "rereduce",
    "save_scores",
    "score_dataset",
    "score_sample",
]
