"""Turn per-sample scores into a retained, ordered subset.

Selection keeps the ``k = floor(|D| * retain_fraction)`` samples with the
smallest scores (ties go to the smaller original index) and returns them in
original order. Equivalently, rank every sample with rank 1 = largest score
and keep ranks greater than ``|D| - k``; :func:`select_by_rank` implements
that formulation independently.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

from . import numcore
from ._fileio import atomic_write_text, sha256_file
from .dataio import dumps_jsonl
from .errors import ConfigError, DataError
from .model import SCORED_MODULES

ORDERINGS = ("original", "random", "min_to_max", "max_to_min")
STATS = ("mean_abs", "mean_signed", "std", "p90", "p95", "p99", "cosine", "pearson")


@dataclass(frozen=True)
class FilterSpec:
    retain_fraction: float = 0.5
    layer_window: int = 3
    module: str = "w_up"
    stat: str = "mean_abs"
    ordering: str = "original"
    order_seed: int = 0
    # explicit [first, last] layer indices; overrides layer_window when set
    layer_range: tuple[int, int] | None = field(default=None)

    def validate(self) -> "FilterSpec":
        if not 0.0 < self.retain_fraction <= 1.0:
            raise ConfigError(f"retain_fraction must lie in (0, 1], got {self.retain_fraction}")
        if self.layer_window < 1:
            raise ConfigError("layer_window must be >= 1")
        if self.stat not in STATS:
            raise ConfigError(f"unknown statistic {self.stat!r}; expected one of {STATS}")
        if self.ordering not in ORDERINGS:
            raise ConfigError(f"unknown ordering {self.ordering!r}; expected one of {ORDERINGS}")
        if self.module not in SCORED_MODULES:
            raise ConfigError(f"unknown module {self.module!r}; expected one of {SCORED_MODULES}")
        return self

    def layers(self, n_layers: int) -> list[int]:
        """Layer indices the score averages over."""
        if self.layer_range is not None:
            first, last = self.layer_range
            if not 0 <= first <= last < n_layers:
                raise ConfigError(f"layer range {self.layer_range} outside model depth {n_layers}")
            return list(range(first, last + 1))
        if self.layer_window > n_layers:
            raise ConfigError(f"layer window {self.layer_window} exceeds model depth {n_layers}")
        return list(range(n_layers - self.layer_window, n_layers))

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.layer_range is not None:
            d["layer_range"] = list(self.layer_range)
        return d


def retain_count(n: int, retain_fraction: float) -> int:
    return int(math.floor(n * retain_fraction))


def _check_scores(scores):
    scores = list(scores)
    if not scores:
        raise ConfigError("no scores to select from")
    idx = [s.index for s in scores]
    if len(set(idx)) != len(idx):
        raise DataError("duplicate sample indices in scores")
    return scores


def select(scores, spec: FilterSpec) -> list[int]:
    """Indices of the k lowest-scoring samples, ascending by original index."""
    spec.validate()
    scores = _check_scores(scores)
    k = retain_count(len(scores), spec.retain_fraction)
    if k == 0:
        raise ConfigError(f"retain fraction {spec.retain_fraction} keeps no samples out of {len(scores)}")
    ranked = sorted(scores, key=lambda s: (s.score, s.index))
    return sorted(s.index for s in ranked[:k])


def select_by_rank(scores, spec: FilterSpec) -> list[int]:
    """Same subset as :func:`select`, via the rank-threshold formulation."""
    spec.validate()
    scores = _check_scores(scores)
    n = len(scores)
    k = retain_count(n, spec.retain_fraction)
    if k == 0:
        raise ConfigError(f"retain fraction {spec.retain_fraction} keeps no samples out of {n}")
    # rank 1 = largest score; among equal scores the larger index ranks first
    desc = sorted(scores, key=lambda s: (s.score, s.index), reverse=True)
    rank = {s.index: r for r, s in enumerate(desc, 1)}
    return [s.index for s in sorted(scores, key=lambda s: s.index) if rank[s.index] > n - k]


def order(indices, scores, spec: FilterSpec) -> list[int]:
    """Arrange retained indices by the FilterSpec ordering strategy."""
    if spec.ordering not in ORDERINGS:
        raise ConfigError(f"unknown ordering {spec.ordering!r}; expected one of {ORDERINGS}")
    indices = list(indices)
    by_index = {s.index: s.score for s in scores}
    missing = [i for i in indices if i not in by_index]
    if missing:
        raise DataError(f"indices without scores: {missing[:5]}")
    if spec.ordering == "original":
        return indices
    if spec.ordering == "min_to_max":
        return sorted(indices, key=lambda i: (by_index[i], i))
    if spec.ordering == "max_to_min":
        return sorted(indices, key=lambda i: (-by_index[i], i))
    perm = numcore.make_rng(spec.order_seed).permutation(len(indices))
    return [indices[int(p)] for p in perm]


def apply(data, kept) -> list:
    data = list(data)
    out = []
    for i in kept:
        if not 0 <= i < len(data):
            raise DataError(f"index {i} out of range for dataset of size {len(data)}")
        out.append(data[i])
    return out


def write_filtered(samples, kept, spec: FilterSpec, out_path, manifest_path, input_path=None) -> None:
    """Materialise the filtered JSONL file and its manifest, both atomically."""
    filtered = apply(samples, kept)
    manifest = {
        "kept_indices": [int(i) for i in kept],
        "spec": spec.to_dict(),
        "input_hash": sha256_file(input_path) if input_path is not None else None,
        "n_input": len(samples),
        "n_kept": len(filtered),
    }
    atomic_write_text(out_path, dumps_jsonl(filtered))
    atomic_write_text(manifest_path, json.dumps(manifest, indent=2) + "\n")
