"""Dense float64 arithmetic and the statistics used to summarise weight changes.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. The only
operation with a custom kernel is :func:`matmul`: BLAS is free to reorder its
summations (and to do so differently per thread count), which would make score
files machine- and load-dependent. The numba kernel below accumulates every
output element strictly in ``k`` order, so it agrees bit-for-bit with a naive
triple loop.
"""

from __future__ import annotations

import math

import numba
import numpy as np

from .errors import DomainError, ShapeError

__all__ = [
    "as_matrix",
    "cosine_similarity",
    "make_rng",
    "matmul",
    "mean_abs",
    "pearson",
    "percentile",
    "std",
]


@numba.njit(cache=True)
def _matmul_kernel(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    # i-p-j order: each out[i, j] still sums over p = 0..k-1 in sequence,
    # while the inner j loop vectorises across independent outputs.
    for i in range(n):
        for p in range(k):
            aip = a[i, p]
            for j in range(m):
                out[i, j] += aip * b[p, j]
    return out


def as_matrix(x) -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with a fixed summation order."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return _matmul_kernel(np.ascontiguousarray(a), np.ascontiguousarray(b))


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; streams are identical on every platform."""
    return np.random.Generator(np.random.PCG64(seed))


def _flat(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise DomainError("empty input")
    return v


def percentile(values, q: float) -> float:
    """Inclusive linear-interpolation percentile, ``q`` a fraction in [0, 1].

    With sorted values ``v`` and ``h = q * (n - 1)`` the result is
    ``v[floor(h)] + (h - floor(h)) * (v[floor(h) + 1] - v[floor(h)])``.
    """
    if not 0.0 <= q <= 1.0:
        raise DomainError(f"q must lie in [0, 1], got {q}")
    v = np.sort(_flat(values))
    h = q * (v.size - 1)
    lo = int(math.floor(h))
    if lo >= v.size - 1:
        return float(v[-1])
    frac = h - lo
    return float(v[lo] + frac * (v[lo + 1] - v[lo]))


def cosine_similarity(a, b) -> float:
    a = _flat(a)
    b = _flat(b)
    if a.size != b.size:
        raise ShapeError(f"length mismatch: {a.size} vs {b.size}")
    aa = float(np.dot(a, a))
    bb = float(np.dot(b, b))
    if aa == 0.0 or bb == 0.0:
        raise DomainError("cosine similarity of a zero-norm vector")
    # sqrt(aa * bb) rather than sqrt(aa) * sqrt(bb): exact 1.0 for identical inputs
    c = float(np.dot(a, b)) / math.sqrt(aa * bb)
    return min(1.0, max(-1.0, c))


def pearson(a, b) -> float:
    """Sample Pearson correlation coefficient."""
    a = _flat(a)
    b = _flat(b)
    if a.size != b.size:
        raise ShapeError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise DomainError("pearson needs at least two points")
    ac = a - a.mean()
    bc = b - b.mean()
    saa = float(np.dot(ac, ac))
    sbb = float(np.dot(bc, bc))
    if saa == 0.0 or sbb == 0.0:
        raise DomainError("pearson of a zero-variance vector")
    r = float(np.dot(ac, bc)) / math.sqrt(saa * sbb)
    return min(1.0, max(-1.0, r))


def mean_abs(m) -> float:
    return float(np.mean(np.abs(_flat(m))))


def std(m) -> float:
    """Population standard deviation (ddof=0) of all entries."""
    return float(np.std(_flat(m)))
