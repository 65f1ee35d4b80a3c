"""Wire format for worker <-> aggregator messages.

All integers are little-endian, there is no padding, and every message
starts with the same 16-byte prefix::

    offset size field
    0      2    magic        b"TC" (0x54 0x43)
    2      1    version      1
    3      1    msg_type     1 gradient, 2 result, 3 prelim up, 4 prelim down, 5 straggler
    4      4    round_num    u32
    8      4    agtr_idx     u32
    12     2    num_worker   u16
    14     2    worker_id    u16 (0xFFFF on PS->worker messages)

Type-specific bodies follow:

    gradient  (1): count u32, bits_per_index u8, payload (packed indices)
    result    (2): count u32, value_width u8, num_aggregated u16, payload (packed sums)
    prelim  (3,4): mode u8 (0 = min/max, 1 = norm), then two f64 (m, M) or one f64 (norm)
    straggler (5): no body

Packed payloads follow the codec bit layout and are exactly
``ceil(count * width / 8)`` bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .codec import pack_bits, packed_size, unpack_bits
from .errors import ProtocolError

MAGIC = b"TC"
VERSION = 1
BROADCAST = 0xFFFF

MSG_GRADIENT = 1
MSG_RESULT = 2
MSG_PRELIM_UP = 3
MSG_PRELIM_DOWN = 4
MSG_STRAGGLER = 5

MODE_MINMAX = 0
MODE_NORM = 1

_PREFIX = struct.Struct("<2sBBIIHH")
_GRAD = struct.Struct("<IB")
_RESULT = struct.Struct("<IBH")
_F64 = struct.Struct("<d")

PREFIX_SIZE = _PREFIX.size
GRADIENT_HEADER_SIZE = _PREFIX.size + _GRAD.size
RESULT_HEADER_SIZE = _PREFIX.size + _RESULT.size


@dataclass(frozen=True)
class GradientPacket:
    round_num: int
    agtr_idx: int
    num_worker: int
    worker_id: int
    count: int
    bits_per_index: int
    payload: bytes
    msg_type = MSG_GRADIENT

    @classmethod
    def from_indices(cls, indices, bits, round_num, agtr_idx, num_worker, worker_id):
        idx = np.asarray(indices)
        return cls(round_num, agtr_idx, num_worker, worker_id, len(idx), bits, pack_bits(idx, bits))

    def indices(self) -> np.ndarray:
        return unpack_bits(self.payload, self.bits_per_index, self.count)


@dataclass(frozen=True)
class ResultPacket:
    round_num: int
    agtr_idx: int
    num_worker: int
    count: int
    value_width: int
    num_aggregated: int
    payload: bytes
    worker_id: int = BROADCAST
    msg_type = MSG_RESULT

    @classmethod
    def from_values(cls, values, value_width, round_num, agtr_idx, num_worker, num_aggregated):
        v = np.asarray(values)
        return cls(round_num, agtr_idx, num_worker, len(v), value_width, num_aggregated,
                   pack_bits(v, value_width))

    def values(self) -> np.ndarray:
        return unpack_bits(self.payload, self.value_width, self.count)


@dataclass(frozen=True)
class PrelimPacket:
    msg_type: int
    round_num: int
    num_worker: int
    worker_id: int
    mode: int
    values: tuple
    agtr_idx: int = 0


@dataclass(frozen=True)
class StragglerNotice:
    round_num: int
    agtr_idx: int
    num_worker: int
    worker_id: int
    msg_type = MSG_STRAGGLER


def _check_range(name, value, bits):
    if not 0 <= value < 1 << bits:
        raise ProtocolError(f"{value} does not fit in {bits} bits", name)


def _prefix(msg_type, pkt) -> bytes:
    _check_range("round_num", pkt.round_num, 32)
    _check_range("agtr_idx", pkt.agtr_idx, 32)
    _check_range("num_worker", pkt.num_worker, 16)
    _check_range("worker_id", pkt.worker_id, 16)
    return _PREFIX.pack(MAGIC, VERSION, msg_type, pkt.round_num, pkt.agtr_idx,
                        pkt.num_worker, pkt.worker_id)


def serialize(pkt) -> bytes:
    if isinstance(pkt, GradientPacket):
        if pkt.worker_id >= pkt.num_worker:
            raise ProtocolError(f"{pkt.worker_id} >= num_worker {pkt.num_worker}", "worker_id")
        _check_range("count", pkt.count, 32)
        _check_range("bits_per_index", pkt.bits_per_index, 8)
        if len(pkt.payload) != packed_size(pkt.count, pkt.bits_per_index):
            raise ProtocolError("payload length does not match count * bits", "payload")
        return _prefix(MSG_GRADIENT, pkt) + _GRAD.pack(pkt.count, pkt.bits_per_index) + pkt.payload
    if isinstance(pkt, ResultPacket):
        _check_range("count", pkt.count, 32)
        _check_range("value_width", pkt.value_width, 8)
        _check_range("num_aggregated", pkt.num_aggregated, 16)
        if len(pkt.payload) != packed_size(pkt.count, pkt.value_width):
            raise ProtocolError("payload length does not match count * width", "payload")
        body = _RESULT.pack(pkt.count, pkt.value_width, pkt.num_aggregated)
        return _prefix(MSG_RESULT, pkt) + body + pkt.payload
    if isinstance(pkt, PrelimPacket):
        if pkt.msg_type not in (MSG_PRELIM_UP, MSG_PRELIM_DOWN):
            raise ProtocolError(f"invalid prelim type {pkt.msg_type}", "msg_type")
        expected = {MODE_MINMAX: 2, MODE_NORM: 1}.get(pkt.mode)
        if expected is None:
            raise ProtocolError(f"unknown mode {pkt.mode}", "mode")
        if len(pkt.values) != expected:
            raise ProtocolError(f"mode {pkt.mode} carries {expected} floats", "values")
        body = bytes([pkt.mode]) + b"".join(_F64.pack(float(v)) for v in pkt.values)
        return _prefix(pkt.msg_type, pkt) + body
    if isinstance(pkt, StragglerNotice):
        return _prefix(MSG_STRAGGLER, pkt)
    raise ProtocolError(f"cannot serialize {type(pkt).__name__}")


def parse(data: bytes):
    data = bytes(data)
    if len(data) < PREFIX_SIZE:
        raise ProtocolError(f"buffer of {len(data)} bytes is shorter than the header", "header")
    magic, version, msg_type, rnd, agtr, nw, wid = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}", "magic")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}", "version")
    body = data[PREFIX_SIZE:]

    if msg_type == MSG_GRADIENT:
        if len(body) < _GRAD.size:
            raise ProtocolError("truncated gradient header", "count")
        count, bits = _GRAD.unpack_from(body)
        payload = body[_GRAD.size:]
        if not 1 <= bits <= 16:
            raise ProtocolError(f"unsupported width {bits}", "bits_per_index")
        if len(payload) != packed_size(count, bits):
            raise ProtocolError(
                f"payload has {len(payload)} bytes, expected {packed_size(count, bits)}", "payload")
        if wid >= nw:
            raise ProtocolError(f"{wid} >= num_worker {nw}", "worker_id")
        return GradientPacket(rnd, agtr, nw, wid, count, bits, payload)

    if msg_type == MSG_RESULT:
        if len(body) < _RESULT.size:
            raise ProtocolError("truncated result header", "count")
        count, width, naggr = _RESULT.unpack_from(body)
        payload = body[_RESULT.size:]
        if not 1 <= width <= 16:
            raise ProtocolError(f"unsupported width {width}", "value_width")
        if len(payload) != packed_size(count, width):
            raise ProtocolError(
                f"payload has {len(payload)} bytes, expected {packed_size(count, width)}", "payload")
        return ResultPacket(rnd, agtr, nw, count, width, naggr, payload, wid)

    if msg_type in (MSG_PRELIM_UP, MSG_PRELIM_DOWN):
        if len(body) < 1:
            raise ProtocolError("missing mode byte", "mode")
        mode = body[0]
        nvals = {MODE_MINMAX: 2, MODE_NORM: 1}.get(mode)
        if nvals is None:
            raise ProtocolError(f"unknown mode {mode}", "mode")
        if len(body) != 1 + 8 * nvals:
            raise ProtocolError(f"prelim body has {len(body)} bytes, expected {1 + 8 * nvals}",
                                "values")
        vals = tuple(_F64.unpack_from(body, 1 + 8 * i)[0] for i in range(nvals))
        return PrelimPacket(msg_type, rnd, nw, wid, mode, vals, agtr)

    if msg_type == MSG_STRAGGLER:
        if body:
            raise ProtocolError(f"{len(body)} trailing bytes", "length")
        return StragglerNotice(rnd, agtr, nw, wid)

    raise ProtocolError(f"unknown message type {msg_type}", "msg_type")
