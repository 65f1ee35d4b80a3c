"""Randomized Hadamard pre/post-processing.

The Walsh-Hadamard transform here is orthonormal: the 1/sqrt(d) factor is
applied inside the transform, so ``fwht`` is its own inverse and preserves
Euclidean norms. The randomized transform is ``H @ D @ x`` where ``D`` is a
Rademacher diagonal shared by every party in a round.

Diagonal derivation rule: the sign vector for ``TransformSeed(round,
base_seed)`` is drawn from a Philox-4x64 bit generator keyed by
``numpy.random.SeedSequence([base_seed, round])``; entry ``j`` is
``1 - 2 * bit_j`` where ``bit_j`` is the j-th output of
``Generator.integers(0, 2, d)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .errors import DimensionError, PreconditionError


@dataclass(frozen=True)
class TransformSeed:
    round: int
    base_seed: int

    def __post_init__(self):
        if self.round < 0:
            raise ValueError(f"round must be >= 0, got {self.round}")
        if not 0 <= self.base_seed < 2**64:
            raise ValueError("base_seed must be an unsigned 64-bit integer")


@dataclass
class PreprocessedVector:
    data: np.ndarray
    original_len: int
    scale_m: float
    scale_M: float


def _is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


def fwht(x) -> np.ndarray:
    """Orthonormal fast Walsh-Hadamard transform (Sylvester ordering)."""
    y = np.array(x, dtype=np.float64)
    if y.ndim != 1:
        raise DimensionError(f"expected a 1-D vector, got shape {y.shape}")
    d = y.shape[0]
    if not _is_pow2(d):
        raise DimensionError(f"length {d} is not a power of two")
    h = 1
    while h < d:
        v = y.reshape(-1, 2, h)
        a = v[:, 0, :].copy()
        v[:, 0, :] += v[:, 1, :]
        v[:, 1, :] = a - v[:, 1, :]
        h *= 2
    y *= 1.0 / math.sqrt(d)
    return y


def rademacher_diag(seed: TransformSeed, d: int) -> np.ndarray:
    if d < 1:
        raise DimensionError(f"d must be >= 1, got {d}")
    ss = np.random.SeedSequence([seed.base_seed, seed.round])
    rng = np.random.Generator(np.random.Philox(ss))
    bits = rng.integers(0, 2, size=d, dtype=np.int8)
    return (1 - 2 * bits).astype(np.float64)


def rht(x, seed: TransformSeed) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not _is_pow2(x.shape[0]):
        raise DimensionError(f"length {x.shape[0]} is not a power of two")
    return fwht(rademacher_diag(seed, x.shape[0]) * x)


def rht_inverse(y, seed: TransformSeed) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return rademacher_diag(seed, y.shape[0]) * fwht(y)


def next_pow2(n: int) -> int:
    return 1 << max(0, (n - 1).bit_length())


def pad_pow2(x):
    """Zero-pad to the next power of two; returns ``(padded, original_len)``."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < 1:
        raise DimensionError("cannot pad an empty vector")
    d = next_pow2(n)
    if d == n:
        return x.copy(), n
    out = np.zeros(d)
    out[:n] = x
    return out, n


def truncate(x, original_len: int) -> np.ndarray:
    return np.asarray(x)[:original_len]


def clamp(x, m: float, M: float) -> np.ndarray:
    if m > M:
        raise PreconditionError(f"clamp range is empty: m={m} > M={M}")
    return np.minimum(np.maximum(np.asarray(x, dtype=np.float64), m), M)


def compute_tp(p: float) -> float:
    """Clamp threshold in standard-normal units: the (1 - p/2) quantile."""
    if not 0.0 < p < 1.0:
        raise PreconditionError(f"p must lie in (0, 1), got {p}")
    return float(ndtri(1.0 - float(p) / 2.0))


def range_from_norm(ell: float, d: int, t_p: float) -> tuple[float, float]:
    if d < 1:
        raise DimensionError(f"d must be >= 1, got {d}")
    if ell < 0:
        raise PreconditionError(f"norm must be non-negative, got {ell}")
    M = t_p * ell / math.sqrt(d)
    return -M, M


def preprocess(x, seed: TransformSeed, ell: float, t_p: float) -> PreprocessedVector:
    """Pad, rotate and clamp ``x`` to the range implied by the global norm."""
    padded, n = pad_pow2(x)
    rotated = rht(padded, seed)
    m, M = range_from_norm(ell, padded.shape[0], t_p)
    return PreprocessedVector(clamp(rotated, m, M), n, m, M)


def postprocess(y, seed: TransformSeed, original_len: int) -> np.ndarray:
    return truncate(rht_inverse(y, seed), original_len)
