"""Software parameter server for homomorphic aggregation.

Each gradient chunk owns an aggregation slot. The packet path only looks
table values up and adds integers; decoding happens on the workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence, Union

import numpy as np

from .codec import check_width
from .errors import PreconditionError, ProtocolError
from .protocol import (
    MODE_MINMAX,
    MODE_NORM,
    MSG_PRELIM_DOWN,
    MSG_PRELIM_UP,
    BROADCAST,
    GradientPacket,
    PrelimPacket,
    ResultPacket,
    StragglerNotice,
)
from .tables import LookupTable


@dataclass
class PSConfig:
    table: LookupTable
    num_worker: int
    value_width: int = 8
    partial_threshold: float = 1.0
    num_slots: int = 1

    def __post_init__(self):
        if self.num_worker < 1:
            raise PreconditionError("num_worker must be >= 1")
        if self.num_slots < 1:
            raise PreconditionError("num_slots must be >= 1")
        frac = Fraction(str(self.partial_threshold))
        if not 0 < frac <= 1:
            raise PreconditionError(f"partial_threshold must lie in (0, 1], got {self.partial_threshold}")
        check_width(self.table.g, self.num_worker, self.value_width)

    @property
    def required(self) -> int:
        """Packets needed before the slot multicasts: ceil(threshold * n)."""
        return math.ceil(Fraction(str(self.partial_threshold)) * self.num_worker)


@dataclass
class SlotMetrics:
    stale: int = 0
    duplicates: int = 0
    late: int = 0
    full_completions: int = 0
    partial_completions: int = 0


@dataclass
class AggregationSlot:
    expected_roundnum: int = 0
    recv_count: int = 0
    received_mask: int = 0
    accumulators: np.ndarray | None = None
    value_width: int = 8
    complete: bool = False
    metrics: SlotMetrics = field(default_factory=SlotMetrics)


@dataclass(frozen=True)
class NotifyStraggler:
    notice: StragglerNotice


@dataclass(frozen=True)
class Accumulated:
    agtr_idx: int
    recv_count: int


@dataclass(frozen=True)
class Multicast:
    result: ResultPacket


@dataclass(frozen=True)
class Duplicate:
    agtr_idx: int
    worker_id: int


@dataclass(frozen=True)
class LateDrop:
    agtr_idx: int
    worker_id: int


PsAction = Union[NotifyStraggler, Accumulated, Multicast, Duplicate, LateDrop]


def reset_round(slot: AggregationSlot, new_round: int) -> None:
    slot.expected_roundnum = new_round
    slot.recv_count = 0
    slot.received_mask = 0
    slot.accumulators = None
    slot.complete = False


class ParameterServer:
    def __init__(self, config: PSConfig):
        self.config = config
        self._table = config.table.array()
        self._required = config.required
        self.slots = [AggregationSlot(value_width=config.value_width)
                      for _ in range(config.num_slots)]

    def metrics(self) -> SlotMetrics:
        total = SlotMetrics()
        for s in self.slots:
            for name in vars(total):
                setattr(total, name, getattr(total, name) + getattr(s.metrics, name))
        return total

    def process_packet(self, pkt: GradientPacket) -> PsAction:
        cfg = self.config
        if pkt.agtr_idx >= len(self.slots):
            raise ProtocolError(f"slot {pkt.agtr_idx} out of range", "agtr_idx")
        if pkt.num_worker != cfg.num_worker:
            raise ProtocolError(f"expected {cfg.num_worker} workers, packet says {pkt.num_worker}",
                                "num_worker")
        if pkt.worker_id >= cfg.num_worker:
            raise ProtocolError(f"unknown worker {pkt.worker_id}", "worker_id")
        if pkt.bits_per_index != cfg.table.b:
            raise ProtocolError(f"table uses {cfg.table.b}-bit indices", "bits_per_index")
        slot = self.slots[pkt.agtr_idx]

        if pkt.round_num < slot.expected_roundnum:
            slot.metrics.stale += 1
            return NotifyStraggler(StragglerNotice(pkt.round_num, pkt.agtr_idx,
                                                   pkt.num_worker, pkt.worker_id))
        if pkt.round_num > slot.expected_roundnum:
            reset_round(slot, pkt.round_num)

        bit = 1 << pkt.worker_id
        if slot.received_mask & bit:
            slot.metrics.duplicates += 1
            return Duplicate(pkt.agtr_idx, pkt.worker_id)
        if slot.complete:
            slot.metrics.late += 1
            return LateDrop(pkt.agtr_idx, pkt.worker_id)

        values = self._table[pkt.indices()]
        if slot.accumulators is None:
            slot.accumulators = values
        elif slot.accumulators.shape != values.shape:
            raise ProtocolError(f"chunk has {slot.accumulators.shape[0]} entries", "count")
        else:
            slot.accumulators = slot.accumulators + values
        slot.received_mask |= bit
        slot.recv_count += 1

        if slot.recv_count < self._required:
            return Accumulated(pkt.agtr_idx, slot.recv_count)
        slot.complete = True
        if slot.recv_count == cfg.num_worker:
            slot.metrics.full_completions += 1
        else:
            slot.metrics.partial_completions += 1
        result = ResultPacket.from_values(slot.accumulators, cfg.value_width, pkt.round_num,
                                          pkt.agtr_idx, cfg.num_worker, slot.recv_count)
        return Multicast(result)


def prelim_aggregate(prelims: Sequence[PrelimPacket]) -> PrelimPacket:
    """Combine per-worker scale reports into the broadcast global scale.

    Min/max mode returns ``(min m_i, max M_i)``; norm mode returns the
    largest norm.
    """
    if not prelims:
        raise PreconditionError("no preliminary reports")
    modes = {p.mode for p in prelims}
    if len(modes) != 1:
        raise ProtocolError("mixed preliminary modes in one round", "mode")
    rounds = {p.round_num for p in prelims}
    if len(rounds) != 1:
        raise ProtocolError("mixed rounds in preliminary stage", "round_num")
    workers = [p.worker_id for p in prelims]
    if len(set(workers)) != len(workers):
        raise ProtocolError("more than one report from a worker", "worker_id")
    if any(p.msg_type != MSG_PRELIM_UP for p in prelims):
        raise ProtocolError("expected worker-to-PS reports", "msg_type")
    mode = modes.pop()
    if mode == MODE_MINMAX:
        vals = (min(p.values[0] for p in prelims), max(p.values[1] for p in prelims))
    elif mode == MODE_NORM:
        vals = (max(p.values[0] for p in prelims),)
    else:
        raise ProtocolError(f"unknown mode {mode}", "mode")
    first = prelims[0]
    return PrelimPacket(MSG_PRELIM_DOWN, first.round_num, first.num_worker, BROADCAST, mode, vals)
