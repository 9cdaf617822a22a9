"""Quantity/quality trade-off model for subset size sweeps.

``E = richness(|D_p|) * (1 + beta * characteristic(D_p))`` where richness
``1 - exp(-lambda * size)`` saturates with subset size and characteristic is the
mean per-sample value over the subset.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from ._fileio import atomic_write_text
from .errors import ConfigError, DomainError
from .filterpipe import FilterSpec, select

CSV_HEADER = ("p", "size", "richness", "characteristic", "E")


@dataclass(frozen=True)
class ObjectiveParams:
    beta: float = 1.0
    lam: float = 0.01

    def validate(self) -> "ObjectiveParams":
        if not self.beta >= 0:
            raise ConfigError("beta must be >= 0")
        if not self.lam > 0:
            raise ConfigError("lambda must be > 0")
        return self

    @classmethod
    def for_dataset(cls, n: int, beta: float = 1.0) -> "ObjectiveParams":
        """Default lambda puts lambda * n at 5, i.e. richness ~0.993 on the full set."""
        return cls(beta=beta, lam=5.0 / max(n, 1))


def richness(size: int, params: ObjectiveParams) -> float:
    if size < 0:
        raise DomainError("size must be >= 0")
    params.validate()
    return -math.expm1(-params.lam * size)


def characteristic(values) -> float:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise DomainError("characteristic of an empty subset")
    return math.fsum(v.tolist()) / v.size


def objective(subset_values, params: ObjectiveParams) -> float:
    v = np.asarray(subset_values, dtype=np.float64).ravel()
    return richness(v.size, params) * (1.0 + params.beta * characteristic(v))


def default_characteristic(scores) -> np.ndarray:
    """Negated min-max normalised scores: 0 for the smallest change, -1 for the largest."""
    s = np.array([e.score for e in scores], dtype=np.float64)
    lo, hi = s.min(), s.max()
    if hi == lo:
        return np.zeros_like(s)
    return -(s - lo) / (hi - lo)


def sweep(all_scores, grid, params: ObjectiveParams, values=None, spec: FilterSpec | None = None):
    """One row per retain fraction: subsets come from :func:`filterpipe.select`.

    ``values`` maps each entry (by list position) to its characteristic value;
    by default :func:`default_characteristic`.
    """
    params.validate()
    all_scores = list(all_scores)
    values = default_characteristic(all_scores) if values is None else np.asarray(values, dtype=np.float64)
    if values.shape != (len(all_scores),):
        raise ConfigError("need exactly one characteristic value per score")
    pos = {e.index: i for i, e in enumerate(all_scores)}
    base = spec or FilterSpec()
    rows = []
    for p in grid:
        if not 0.0 < p <= 1.0:
            raise ConfigError(f"grid value {p} outside (0, 1]")
        kept = select(all_scores, FilterSpec(retain_fraction=p, layer_window=base.layer_window,
                                             module=base.module, stat=base.stat))
        sub = values[[pos[i] for i in kept]]
        r = richness(len(kept), params)
        c = characteristic(sub)
        rows.append({"p": p, "size": len(kept), "richness": r, "characteristic": c,
                     "E": r * (1.0 + params.beta * c)})
    return rows


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow([repr(float(r["p"])), int(r["size"]), repr(r["richness"]),
                    repr(r["characteristic"]), repr(r["E"])])
    return buf.getvalue()


def write_csv(rows, path) -> None:
    atomic_write_text(path, rows_to_csv(rows))
