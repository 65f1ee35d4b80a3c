"""Homomorphic stochastic quantization and index packing.

Workers quantize against a grid shared by everybody in the round, send
b-bit table indices, and the aggregator sums looked-up table values as
plain integers. Decoding the average of those sums equals averaging the
workers' individual decodings.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import OverflowConfigError, PreconditionError, ProtocolError
from .tables import LookupTable, QuantizationValues, calc_quantization_values

DEFAULT_INDEX_BITS = 4
DEFAULT_VALUE_WIDTH = 8


@dataclass(frozen=True)
class EncodedGradient:
    indices: bytes
    count: int
    bits_per_index: int
    scale: tuple
    round: int = 0
    worker_id: int = 0

    def unpack(self) -> np.ndarray:
        return unpack_bits(self.indices, self.bits_per_index, self.count)


@dataclass
class QuantizedVector:
    x_q: np.ndarray
    y: np.ndarray


@dataclass
class AggregatedPayload:
    y_sum: np.ndarray
    num_workers: int
    value_width: int
    scale: tuple
    g: int


# ---------------------------------------------------------------------------
# Bit packing: value k occupies stream bits [k*w, (k+1)*w), LSB first, and
# stream bit i lives in byte i // 8 at bit position i % 8.


def pack_bits(values, width: int) -> bytes:
    if not 1 <= width <= 16:
        raise ValueError(f"width must be in 1..16, got {width}")
    v = np.asarray(values, dtype=np.int64).ravel()
    if v.size and (v.min() < 0 or v.max() >= 1 << width):
        raise ValueError(f"value out of range for {width}-bit field")
    bits = ((v[:, None] >> np.arange(width)) & 1).astype(np.uint8)
    return np.packbits(bits.ravel(), bitorder="little").tobytes()


def unpack_bits(data: bytes, width: int, count: int) -> np.ndarray:
    if not 1 <= width <= 16:
        raise ValueError(f"width must be in 1..16, got {width}")
    need = packed_size(count, width)
    if len(data) < need:
        raise ValueError(f"need {need} bytes for {count} x {width}-bit values, got {len(data)}")
    raw = np.frombuffer(data, dtype=np.uint8, count=need)
    bits = np.unpackbits(raw, bitorder="little", count=count * width)
    weights = (1 << np.arange(width)).astype(np.int64)
    return bits.reshape(count, width).astype(np.int64) @ weights


def packed_size(count: int, width: int) -> int:
    return (count * width + 7) // 8


# ---------------------------------------------------------------------------
# Quantization


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    entropy = list(seed) if isinstance(seed, (tuple, list)) else seed
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def encoding_seed(base_seed: int, worker_id: int, round_num: int, chunk: int = 0) -> tuple:
    """Seed for one worker's quantization draws of one chunk in one round."""
    return (base_seed, worker_id, round_num, chunk, 0x5351)


def _sq_indices(x, q: np.ndarray, rng_seed) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size and (x.min() < q[0] or x.max() > q[-1]):
        raise PreconditionError("coordinate outside [m, M]; clamp before quantizing")
    lo = np.clip(np.searchsorted(q, x, side="right") - 1, 0, len(q) - 2)
    c0, c1 = q[lo], q[lo + 1]
    p_up = (x - c0) / (c1 - c0)
    # coordinate j consumes the j-th uniform draw
    u = _rng(rng_seed).random(x.shape[0])
    return lo + (u < p_up)


def sq(x, Q: QuantizationValues, rng_seed) -> np.ndarray:
    """Round each coordinate to one of its two bracketing values, unbiasedly.

    A coordinate ``a`` with ``c0 <= a <= c1`` becomes ``c1`` with probability
    ``(a - c0) / (c1 - c0)`` and ``c0`` otherwise.
    """
    return Q.q[_sq_indices(x, Q.q, rng_seed)]


def usq_encode(x, m: float, M: float, b: int, rng_seed, round: int = 0,
               worker_id: int = 0) -> EncodedGradient:
    if not m < M:
        raise PreconditionError(f"need m < M, got m={m}, M={M}")
    levels = 2**b - 1
    q = m + np.arange(levels + 1) * (M - m) / levels
    z = _sq_indices(x, q, rng_seed)
    return EncodedGradient(pack_bits(z, b), len(z), b, (float(m), float(M)), round, worker_id)


def quantize(x, m: float, M: float, table: LookupTable, rng_seed) -> QuantizedVector:
    """Stochastic quantization plus the integer map ``Y = (X - m) g / (M - m)``."""
    Q = calc_quantization_values(m, M, table)
    xq = sq(x, Q, rng_seed)
    yf = (xq - m) * table.g / (M - m)
    y = np.rint(yf).astype(np.int64)
    if y.size:
        assert np.max(np.abs(yf - y)) < 1e-6, "quantized values left the integer grid"
    return QuantizedVector(xq, y)


def thc_encode(x_clamped, m: float, M: float, table: LookupTable, rng_seed,
               round: int = 0, worker_id: int = 0) -> EncodedGradient:
    qv = quantize(x_clamped, m, M, table, rng_seed)
    z = table.inverse()[qv.y]
    assert not np.any(z < 0), "integer value outside the table image"
    return EncodedGradient(pack_bits(z, table.b), len(z), table.b, (float(m), float(M)),
                           round, worker_id)


def check_width(g: int, n: int, value_width: int) -> None:
    if g * n > 2**value_width - 1:
        raise OverflowConfigError(
            f"g*n = {g}*{n} = {g * n} does not fit in {value_width} bits (max {2**value_width - 1})"
        )


def min_value_width(g: int, n: int) -> int:
    return max(1, (g * n).bit_length())


def table_lookup_sum(encoded: Sequence[EncodedGradient], table: LookupTable,
                     value_width: int = DEFAULT_VALUE_WIDTH) -> AggregatedPayload:
    if not encoded:
        raise PreconditionError("nothing to aggregate")
    check_width(table.g, len(encoded), value_width)
    first = encoded[0]
    for e in encoded[1:]:
        if e.round != first.round:
            raise ProtocolError(f"mixed rounds {first.round} and {e.round}", "round")
        if e.count != first.count:
            raise ProtocolError(f"mixed dimensions {first.count} and {e.count}", "count")
        if e.scale != first.scale:
            raise ProtocolError("workers used different quantization ranges", "scale")
    T = table.array()
    y = np.zeros(first.count, dtype=np.int64)
    for e in encoded:
        y += T[e.unpack()]
    return AggregatedPayload(y, len(encoded), value_width, first.scale, table.g)


def decode_values(y, n: int, m: float, M: float, g: int) -> np.ndarray:
    """``m + (y / n) * (M - m) / g``; shared by every decoder."""
    return m + np.asarray(y, dtype=np.float64) / n * (M - m) / g


def decode_aggregate(payload: AggregatedPayload) -> np.ndarray:
    if payload.num_workers < 1:
        raise PreconditionError("cannot decode an aggregate of zero workers")
    m, M = payload.scale
    return decode_values(payload.y_sum, payload.num_workers, m, M, payload.g)


def decode_self(encoded: EncodedGradient, table: LookupTable, m=None, M=None) -> np.ndarray:
    if m is None or M is None:
        m, M = encoded.scale
    y = table.array()[encoded.unpack()]
    return m + y * (M - m) / table.g
