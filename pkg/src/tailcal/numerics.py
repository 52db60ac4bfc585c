"""Dense numeric kernel: validated vectors/matrices, simplex utilities,
numerically stable softmax family, and deterministic random streams.

All arithmetic is 64-bit floating point. Probability vectors are plain
float64 arrays validated by :func:`prob_vector`; construction tolerance is
1e-9 on the simplex sum, algebraic identities hold to 1e-12.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DimensionError,
    NormalizationError,
    NumericInputError,
)

SIMPLEX_ATOL = 1e-9
IDENTITY_ATOL = 1e-12

_MASK64 = (1 << 64) - 1


def as_vector(values) -> np.ndarray:
    """Coerce to a finite 1-D float64 array."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DimensionError(f"expected a non-empty 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise NumericInputError("vector contains NaN or Inf")
    return v


def as_matrix(values) -> np.ndarray:
    """Coerce to a finite 2-D float64 array."""
    m = np.asarray(values, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise DimensionError(f"expected a non-empty 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericInputError("matrix contains NaN or Inf")
    return m


def prob_vector(values, *, atol: float = SIMPLEX_ATOL, min_len: int = 2) -> np.ndarray:
    """Validate a point on the probability simplex and return it as float64.

    Entries must be non-negative and sum to 1 within ``atol``; length must be
    at least ``min_len`` (class distributions need two or more entries).
    """
    p = as_vector(values)
    if p.size < min_len:
        raise DimensionError(f"probability vector needs >= {min_len} entries, got {p.size}")
    if np.any(p < 0):
        raise NormalizationError(f"negative probability entry: min={p.min()}")
    total = float(p.sum())
    if abs(total - 1.0) > atol:
        raise NormalizationError(f"probabilities sum to {total!r}, not 1 within {atol}")
    return p


def prob_matrix(values, *, atol: float = SIMPLEX_ATOL) -> np.ndarray:
    """Validate a matrix whose rows all lie on the simplex."""
    m = as_matrix(values)
    if m.shape[1] < 2:
        raise DimensionError(f"posterior matrix needs >= 2 columns, got {m.shape[1]}")
    if np.any(m < 0):
        raise NormalizationError("negative posterior entry")
    sums = m.sum(axis=1)
    bad = np.abs(sums - 1.0) > atol
    if np.any(bad):
        i = int(np.argmax(bad))
        raise NormalizationError(f"row {i} sums to {sums[i]!r}, not 1 within {atol}")
    return m


def log_sum_exp(z) -> float:
    """log(sum(exp(z))) computed as m + log(sum(exp(z - m))), m = max(z)."""
    v = as_vector(z)
    m = float(v.max())
    return m + float(np.log(np.exp(v - m).sum()))


def log_sum_exp_rows(z) -> np.ndarray:
    """Row-wise log-sum-exp of a matrix."""
    m = as_matrix(z)
    mx = m.max(axis=1, keepdims=True)
    return (mx + np.log(np.exp(m - mx).sum(axis=1, keepdims=True)))[:, 0]


def softmax(z) -> np.ndarray:
    """Stable softmax of a logit vector; argmax is preserved exactly.

    Max-subtraction keeps the exponentials bounded, so any finite input is
    safe, including extremes like [1000, 0].
    """
    v = as_vector(z)
    if v.size < 2:
        raise DimensionError("softmax needs >= 2 logits")
    e = np.exp(v - v.max())
    return e / e.sum()


def softmax_rows(z) -> np.ndarray:
    """Row-wise stable softmax of a logit matrix."""
    m = as_matrix(z)
    if m.shape[1] < 2:
        raise DimensionError("softmax needs >= 2 logits per row")
    e = np.exp(m - m.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(z) -> np.ndarray:
    """log(softmax(z)), i.e. z - log_sum_exp(z)."""
    v = as_vector(z)
    if v.size < 2:
        raise DimensionError("log_softmax needs >= 2 logits")
    return v - log_sum_exp(v)


def normalize_to_simplex(v) -> np.ndarray:
    """Divide non-negative entries by their sum to land on the simplex."""
    x = as_vector(v)
    if x.size < 2:
        raise DimensionError("simplex normalization needs >= 2 entries")
    if np.any(x < 0):
        raise NormalizationError(f"negative entry {x.min()} cannot be normalized")
    total = float(x.sum())
    if total <= 0.0:
        raise NormalizationError("all-zero vector cannot be normalized")
    return x / total


def _splitmix64(x: int) -> int:
    """One splitmix64 finalizer step; the standard 64-bit avalanche mix."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


@dataclass(frozen=True)
class RngStream:
    """Counter-based deterministic random stream.

    Identical (seed, stream_id) pairs yield identical draw sequences on every
    platform running the same build, and distinct stream ids are statistically
    independent, so per-trial streams can be consumed in any order (or in
    parallel) without changing any result.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "seed", int(self.seed) & _MASK64)
        object.__setattr__(self, "stream_id", int(self.stream_id) & _MASK64)

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, index: int) -> "RngStream":
        """Derive an independent sub-stream; same seed, mixed stream id."""
        mixed = _splitmix64(_splitmix64(self.stream_id) ^ (int(index) & _MASK64))
        return RngStream(self.seed, mixed)
