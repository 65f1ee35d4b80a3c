"""Optimal non-uniform lookup tables.

A table maps the ``2**b`` transmitted indices to integers in ``[0, g]``.
With a clamp range ``[-t_p, t_p]`` the integer ``i`` stands for the
quantization value ``2 * t_p * i / g - t_p``; the best table minimizes the
variance of unbiased stochastic quantization of a standard normal variable
restricted to that range.

Canonical tables are strictly increasing with ``T[0] = 0`` and
``T[-1] = g``, which makes the candidate family a stars-and-bars family:
``2**b - 1`` positive gaps summing to ``g``. There are
``C(g - 1, 2**b - 2)`` of them.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import InfeasibleError, PreconditionError, TableFormatError, TableNotFoundError
from .hadamard import compute_tp

FULL_SEARCH_LIMIT = 2_000_000
_BATCH = 65536
_SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class TableKey:
    b: int
    g: int
    p: Fraction

    def __post_init__(self):
        object.__setattr__(self, "p", Fraction(self.p))
        if self.b < 1:
            raise InfeasibleError(f"bit budget must be >= 1, got {self.b}")
        if self.g < 2**self.b - 1:
            raise InfeasibleError(
                f"granularity {self.g} < 2**b - 1 = {2**self.b - 1}: no strictly increasing table"
            )
        if not 0 < self.p < 1:
            raise PreconditionError(f"p must lie in (0, 1), got {self.p}")

    @property
    def size(self) -> int:
        return 2**self.b


@dataclass(frozen=True)
class LookupTable:
    key: TableKey
    t_p: float
    values: tuple
    variance: float
    _inverse: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        vals = tuple(int(v) for v in self.values)
        object.__setattr__(self, "values", vals)
        validate_table(vals, self.key.b, self.key.g)
        inv = np.full(self.key.g + 1, -1, dtype=np.int64)
        inv[list(vals)] = np.arange(len(vals))
        object.__setattr__(self, "_inverse", inv)

    @property
    def b(self) -> int:
        return self.key.b

    @property
    def g(self) -> int:
        return self.key.g

    def array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.int64)

    def inverse(self) -> np.ndarray:
        """Integer in ``[0, g]`` -> table index, or -1 if not in the image."""
        return self._inverse

    @classmethod
    def identity(cls, b: int, p=Fraction(1, 32)) -> "LookupTable":
        """The uniform table ``T[j] = j`` with ``g = 2**b - 1``."""
        key = TableKey(b, 2**b - 1, Fraction(p))
        t_p = compute_tp(float(key.p))
        vals = tuple(range(2**b))
        return cls(key, t_p, vals, quantization_variance(vals, t_p))


@dataclass(frozen=True)
class QuantizationValues:
    q: np.ndarray
    m: float
    M: float


def validate_table(values: Sequence[int], b: int | None = None, g: int | None = None):
    vals = list(values)
    if len(vals) < 2:
        raise PreconditionError("a table needs at least two entries")
    if b is not None and len(vals) != 2**b:
        raise PreconditionError(f"table has {len(vals)} entries, expected 2**{b}")
    if vals[0] != 0:
        raise PreconditionError(f"T[0] must be 0, got {vals[0]}")
    if g is not None and vals[-1] != g:
        raise PreconditionError(f"T[-1] must equal g={g}, got {vals[-1]}")
    if any(b2 <= a for a, b2 in zip(vals, vals[1:])):
        raise PreconditionError(f"table is not strictly increasing: {vals}")


def is_mirror_symmetric(values: Sequence[int]) -> bool:
    """``T[K-1-z] == g - T[z]`` for all z (the normal-density symmetry)."""
    g = values[-1]
    k = len(values)
    return all(values[k - 1 - z] == g - values[z] for z in range(k))


# ---------------------------------------------------------------------------
# Enumeration


def stars_and_bars(n: int, k: int) -> Iterator[list[int]]:
    """Yield every placement of ``n`` identical balls into ``k`` bins.

    Follows the bin-rotation update: find the first non-empty bin ``a``,
    move one ball to ``a + 1`` and gather the rest of bin ``a`` into bin 0.
    The first option is all balls in bin 0, the last all balls in bin
    ``k - 1``.
    """
    if n < 0 or k < 1:
        raise InfeasibleError(f"stars-and-bars needs n >= 0 and k >= 1, got n={n}, k={k}")
    B = [0] * k
    B[0] = n
    yield list(B)
    for _ in range(math.comb(n + k - 1, k - 1) - 1):
        a = 0
        while B[a] == 0:
            a += 1
        B[a + 1] += 1
        rest = B[a] - 1
        B[a] = 0
        B[0] = rest
        yield list(B)


def count_tables(b: int, g: int, symmetric: bool = False) -> int:
    k = 2**b
    if g < k - 1:
        return 0
    if symmetric:
        return math.comb((g - 1) // 2, k // 2 - 1)
    return math.comb(g - 1, k - 2)


def _symmetric_params(b: int, g: int) -> tuple[int, int]:
    # First half 0 = T[0] < ... < T[h-1] <= (g-1)//2: h-1 positive gaps plus
    # one slack bin.
    h = 2 ** (b - 1)
    return (g - 1) // 2 - (h - 1), h


def _bins_to_table(bins: Sequence[int], b: int, g: int, symmetric: bool) -> tuple:
    if not symmetric:
        out = [0]
        for gap in bins:
            out.append(out[-1] + gap + 1)
        return tuple(out)
    half = [0]
    for gap in bins[:-1]:
        half.append(half[-1] + gap + 1)
    return tuple(half + [g - v for v in reversed(half)])


def enumerate_tables(b: int, g: int, symmetric: bool = False) -> Iterator[tuple]:
    """Yield every canonical table for ``(b, g)``.

    With ``symmetric=True`` only tables satisfying
    ``T[2**b - 1 - z] = g - T[z]`` are produced.
    """
    TableKey(b, g, Fraction(1, 2))  # feasibility check
    if symmetric:
        n, k = _symmetric_params(b, g)
    else:
        n, k = g - (2**b - 1), 2**b - 1
    for bins in stars_and_bars(n, k):
        yield _bins_to_table(bins, b, g, symmetric)


def _table_batches(b: int, g: int, symmetric: bool) -> Iterator[np.ndarray]:
    buf = []
    for t in enumerate_tables(b, g, symmetric):
        buf.append(t)
        if len(buf) == _BATCH:
            yield np.array(buf, dtype=np.int64)
            buf = []
    if buf:
        yield np.array(buf, dtype=np.int64)


# ---------------------------------------------------------------------------
# Objective


def _phi(a):
    return np.exp(-0.5 * np.square(a)) / _SQRT_2PI


def _interval_variance(lo, hi):
    """Closed form of the integral of (a - lo)(hi - a) phi(a) over [lo, hi]."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    pl, ph = _phi(lo), _phi(hi)
    m0 = ndtr(hi) - ndtr(lo)
    m1 = pl - ph
    m2 = m0 + lo * pl - hi * ph
    return -m2 + (lo + hi) * m1 - lo * hi * m0


def grid_points(g: int, t_p: float) -> np.ndarray:
    return 2.0 * t_p * np.arange(g + 1) / g - t_p


def _gauss_legendre(values, t_p, nodes):
    x, w = np.polynomial.legendre.leggauss(nodes)
    q = grid_points(values[-1], t_p)[list(values)]
    lo, hi = q[:-1, None], q[1:, None]
    half = (hi - lo) / 2.0
    a = lo + half * (x[None, :] + 1.0)
    f = (a - lo) * (hi - a) * _phi(a)
    return float(np.sum(half[:, 0] * (f @ w)))


def quantization_variance(T, t_p: float, tol: float = 1e-12, method: str = "closed") -> float:
    """Variance of unbiased stochastic quantization onto table ``T``.

    The source is a standard normal variable restricted (not renormalized)
    to ``[-t_p, t_p]``. ``method`` is ``"closed"`` (normal pdf/CDF moments)
    or ``"quadrature"`` (per-interval Gauss-Legendre, doubled from 32 nodes
    until two successive estimates agree to ``tol``).
    """
    vals = [int(v) for v in T]
    validate_table(vals)
    if tol <= 0:
        raise PreconditionError("tol must be positive")
    if method == "closed":
        q = grid_points(vals[-1], t_p)[vals]
        return float(np.sum(_interval_variance(q[:-1], q[1:])))
    if method == "quadrature":
        nodes = 32
        prev = _gauss_legendre(vals, t_p, nodes)
        while nodes < 1024:
            nodes *= 2
            cur = _gauss_legendre(vals, t_p, nodes)
            if abs(cur - prev) <= tol:
                return cur
            prev = cur
        raise PreconditionError("quadrature did not reach the requested tolerance")
    raise ValueError(f"unknown method {method!r}")


def edge_weights(g: int, t_p: float) -> np.ndarray:
    """``W[i, j]`` = variance contribution of adjacent values ``i < j``."""
    q = grid_points(g, t_p)
    W = np.full((g + 1, g + 1), np.inf)
    iu = np.triu_indices(g + 1, k=1)
    W[iu] = _interval_variance(q[iu[0]], q[iu[1]])
    return W


# ---------------------------------------------------------------------------
# Solvers


def _pick(pool, best, tol):
    ties = [t for t, v in pool if v <= best + tol]
    return min(ties)


def _solve_enumerate(b, g, t_p, tol, symmetric):
    W = edge_weights(g, t_p)
    best = math.inf
    pool: list = []
    for batch in _table_batches(b, g, symmetric):
        v = W[batch[:, :-1], batch[:, 1:]].sum(axis=1)
        vmin = float(v.min())
        if vmin > best + tol:
            continue
        best = min(best, vmin)
        near = np.nonzero(v <= best + tol)[0]
        pool = [(t, pv) for t, pv in pool if pv <= best + tol]
        pool.extend((tuple(int(x) for x in batch[i]), float(v[i])) for i in near)
    return _pick(pool, best, tol)


def optimal_table_dp(b: int, g: int, t_p: float, tol: float = 1e-12) -> tuple:
    """Exact optimum over all canonical tables by shortest path on the grid.

    The objective is a sum of per-gap terms, so the best table is the
    cheapest path ``0 -> g`` using exactly ``2**b - 1`` increasing steps.
    Ties within ``tol`` resolve to the lexicographically smallest table.
    """
    TableKey(b, g, Fraction(1, 2))
    steps = 2**b - 1
    W = edge_weights(g, t_p)
    # togo[s, i]: cheapest cost from value i to g in exactly s steps
    togo = np.full((steps + 1, g + 1), np.inf)
    togo[0, g] = 0.0
    for s in range(1, steps + 1):
        togo[s] = np.min(W + togo[s - 1][None, :], axis=1)
    out = [0]
    for s in range(steps, 0, -1):
        i = out[-1]
        cost = W[i] + togo[s - 1]
        j = int(np.nonzero(cost <= cost.min() + tol)[0][0])
        out.append(j)
    return tuple(out)


def solve_optimal_table(key: TableKey, tol: float = 1e-12, search: str = "auto",
                        max_candidates: int = FULL_SEARCH_LIMIT) -> LookupTable:
    """Find the minimum-variance table for ``key``.

    ``search``:
      * ``"full"`` - score every canonical table;
      * ``"symmetric"`` - score only mirror-symmetric tables;
      * ``"dp"`` - shortest-path optimum over the full family;
      * ``"auto"`` - ``"full"`` when the family has at most
        ``max_candidates`` members, otherwise ``"dp"``.

    ``"full"`` and ``"dp"`` return the same table (exact optimum, ties to the
    lexicographically smallest). ``"symmetric"`` is exact only over the
    symmetric subfamily.
    """
    b, g = key.b, key.g
    t_p = compute_tp(float(key.p))
    if search == "auto":
        search = "full" if count_tables(b, g) <= max_candidates else "dp"
    if search == "full":
        vals = _solve_enumerate(b, g, t_p, tol, symmetric=False)
    elif search == "symmetric":
        vals = _solve_enumerate(b, g, t_p, tol, symmetric=True)
    elif search == "dp":
        vals = optimal_table_dp(b, g, t_p, tol)
    else:
        raise ValueError(f"unknown search mode {search!r}")
    return LookupTable(key, t_p, vals, quantization_variance(vals, t_p))


def calc_quantization_values(m: float, M: float, table: LookupTable) -> QuantizationValues:
    if not m < M:
        raise PreconditionError(f"quantization range needs m < M, got m={m}, M={M}")
    q = m + table.array() * (M - m) / table.g
    # m + g * (M - m) / g can miss M by an ulp; clamped inputs sit exactly on M
    q[-1] = M
    return QuantizationValues(q, float(m), float(M))


# ---------------------------------------------------------------------------
# Cache file
#
# One record per table:
#     b g p_num p_den t_p variance
#     T[0] T[1] ... T[2**b - 1]
# Reals are written with 17 significant digits.


def _format_record(table: LookupTable) -> str:
    k = table.key
    head = f"{k.b} {k.g} {k.p.numerator} {k.p.denominator} {table.t_p:.17g} {table.variance:.17g}"
    return head + "\n" + " ".join(str(v) for v in table.values) + "\n"


def _parse_records(data: bytes) -> list[LookupTable]:
    tables = []
    lines = data.split(b"\n")
    offset = 0
    i = 0
    while i < len(lines):
        head = lines[i]
        head_off = offset
        offset += len(head) + 1
        i += 1
        if not head.strip():
            continue
        parts = head.split()
        if len(parts) != 6:
            raise TableFormatError(f"header needs 6 fields, found {len(parts)}", head_off)
        try:
            b, g, pn, pd = (int(x) for x in parts[:4])
            t_p, var = float(parts[4]), float(parts[5])
        except ValueError:
            raise TableFormatError("unparseable header field", head_off) from None
        if i >= len(lines) or (i == len(lines) - 1 and not lines[i].strip()):
            raise TableFormatError("record truncated: missing table values", offset)
        body = lines[i]
        body_off = offset
        offset += len(body) + 1
        i += 1
        try:
            vals = [int(x) for x in body.split()]
        except ValueError:
            raise TableFormatError("unparseable table value", body_off) from None
        if b < 1 or len(vals) != 2**b:
            raise TableFormatError(f"expected 2**{b} table values, found {len(vals)}", body_off)
        try:
            tables.append(LookupTable(TableKey(b, g, Fraction(pn, pd)), t_p, tuple(vals), var))
        except (PreconditionError, InfeasibleError, ZeroDivisionError) as exc:
            raise TableFormatError(f"invalid table record: {exc}", head_off) from None
    return tables


def read_cache(path) -> list[LookupTable]:
    with open(path, "rb") as fh:
        return _parse_records(fh.read())


def save_table(path, table: LookupTable) -> None:
    """Insert or replace ``table`` in the cache file at ``path``."""
    existing = read_cache(path) if os.path.exists(path) else []
    records = [t for t in existing if t.key != table.key] + [table]
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="ascii") as fh:
        fh.writelines(_format_record(t) for t in records)
    os.replace(tmp, path)


def load_table(path, key: TableKey) -> LookupTable:
    if not os.path.exists(path):
        raise TableNotFoundError(f"no table cache at {path}")
    for t in read_cache(path):
        if t.key == key:
            return t
    raise TableNotFoundError(f"no table for b={key.b} g={key.g} p={key.p} in {path}")
