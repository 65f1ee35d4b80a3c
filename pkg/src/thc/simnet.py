"""Deterministic discrete-event network between workers and the aggregator.

Time is an integer tick. Every packet independently survives with
probability ``1 - loss_rate``; the draw is a hash of the network seed and
the packet identity, so a run is reproducible regardless of event order.
A worker that has not heard back for a chunk by the timeout proceeds as if
it received an all-zero result for that chunk.
"""

from __future__ import annotations

import hashlib
import heapq
import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Protocol, Sequence

import numpy as np

from .aggregator import Accumulated, Duplicate, LateDrop, Multicast, NotifyStraggler, ParameterServer
from .errors import PreconditionError
from .protocol import GradientPacket, ResultPacket, StragglerNotice, parse, serialize

UP = 0
DOWN = 1


@dataclass(frozen=True)
class StragglerPolicy:
    kind: str = "none"
    workers: tuple = ()
    k: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "fixed", "random"):
            raise PreconditionError(f"unknown straggler policy {self.kind!r}")
        if self.k < 0:
            raise PreconditionError("k must be >= 0")

    def select(self, round_num: int, num_workers: int, seed: int) -> frozenset:
        if self.kind == "fixed":
            return frozenset(self.workers)
        if self.kind == "random" and self.k:
            if self.k > num_workers:
                raise PreconditionError(f"cannot pick {self.k} stragglers from {num_workers} workers")
            rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, round_num, 0x57])))
            return frozenset(int(w) for w in rng.choice(num_workers, self.k, replace=False))
        return frozenset()


@dataclass(frozen=True)
class NetConfig:
    loss_rate: float = 0.0
    stragglers: StragglerPolicy = field(default_factory=StragglerPolicy)
    timeout: int = 16
    latency: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.loss_rate < 1.0:
            raise PreconditionError(f"loss_rate must lie in [0, 1), got {self.loss_rate}")
        if self.latency < 1 or self.timeout <= 2 * self.latency:
            raise PreconditionError("timeout must exceed one round trip")


@dataclass(order=True)
class Event:
    time: int
    seq: int
    kind: str = field(compare=False)
    payload: Any = field(compare=False, default=None)


class SimWorker(Protocol):
    worker_id: int
    model: np.ndarray

    def outgoing(self, round_num: int) -> list[GradientPacket]: ...
    def on_result(self, pkt: ResultPacket) -> None: ...
    def on_timeout(self, round_num: int, chunk: int) -> None: ...
    def finish_round(self, round_num: int) -> np.ndarray: ...


@dataclass
class RoundReport:
    round_num: int
    updates: dict
    fingerprints: dict
    stragglers: frozenset
    zero_filled: dict
    stats: Counter

    @property
    def diverged(self) -> bool:
        return len(set(self.fingerprints.values())) > 1


def fingerprint(update: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(update, dtype=np.float64).tobytes()).hexdigest()[:16]


class SimulatedNetwork:
    def __init__(self, config: NetConfig):
        self.config = config
        self.now = 0
        self._queue: list[Event] = []
        self._seq = 0
        self.counts = Counter()
        self.trace: list[tuple] = []

    def schedule(self, time: int, kind: str, payload=None) -> None:
        heapq.heappush(self._queue, Event(time, self._seq, kind, payload))
        self._seq += 1

    def pop(self) -> Event | None:
        if not self._queue:
            return None
        ev = heapq.heappop(self._queue)
        self.now = ev.time
        return ev

    def is_lost(self, direction: int, msg_type: int, round_num: int, agtr_idx: int,
                src: int, dst: int) -> bool:
        if self.config.loss_rate == 0.0:
            return False
        ident = struct.pack("<QBBIIII", self.config.seed & (2**64 - 1), direction, msg_type,
                            round_num, agtr_idx, src, dst)
        h = int.from_bytes(hashlib.blake2b(ident, digest_size=8).digest(), "little")
        return h / 2.0**64 < self.config.loss_rate

    def send(self, data: bytes, direction: int, src: int, dst: int) -> bool:
        """Queue ``data`` for delivery after one latency unless it is lost."""
        pkt = parse(data)
        name = "up" if direction == UP else "down"
        self.counts[f"sent_{name}"] += 1
        lost = self.is_lost(direction, pkt.msg_type, pkt.round_num, pkt.agtr_idx, src, dst)
        self.trace.append((self.now, direction, pkt.msg_type, pkt.round_num, pkt.agtr_idx,
                           src, dst, lost))
        if lost:
            self.counts[f"dropped_{name}"] += 1
            return False
        self.counts[f"delivered_{name}"] += 1
        self.schedule(self.now + self.config.latency, "deliver", (direction, src, dst, data))
        return True


def run_round(workers: Sequence[SimWorker], ps: ParameterServer, net: SimulatedNetwork,
              round_num: int) -> RoundReport:
    """Drive one main-stage exchange to completion and collect the updates."""
    cfg = net.config
    n = len(workers)
    stats = Counter()
    stragglers = cfg.stragglers.select(round_num, n, cfg.seed)
    pending: set[tuple[int, int]] = set()
    uplink_lost: set[tuple[int, int]] = set()
    zero_filled = {w.worker_id: [] for w in workers}
    by_id = {w.worker_id: w for w in workers}

    net.schedule(net.now, "round_start", round_num)
    while (ev := net.pop()) is not None:
        if ev.kind == "round_start":
            t0 = net.now
            for w in workers:
                for pkt in w.outgoing(round_num):
                    key = (w.worker_id, pkt.agtr_idx)
                    pending.add(key)
                    net.schedule(t0 + cfg.timeout, "timeout", key)
                    if w.worker_id in stragglers:
                        stats["suppressed"] += 1
                        uplink_lost.add(key)
                        continue
                    if not net.send(serialize(pkt), UP, w.worker_id, n):
                        uplink_lost.add(key)
        elif ev.kind == "deliver":
            direction, src, dst, data = ev.payload
            pkt = parse(data)
            if direction == UP:
                action = ps.process_packet(pkt)
                if isinstance(action, Multicast):
                    out = serialize(action.result)
                    stats["partial" if action.result.num_aggregated < n else "complete"] += 1
                    for w in workers:
                        net.send(out, DOWN, n, w.worker_id)
                elif isinstance(action, NotifyStraggler):
                    stats["straggler_notices"] += 1
                    net.send(serialize(action.notice), DOWN, n, pkt.worker_id)
                elif isinstance(action, Duplicate):
                    stats["duplicates"] += 1
                elif isinstance(action, LateDrop):
                    stats["late_drops"] += 1
                else:
                    assert isinstance(action, Accumulated)
            elif isinstance(pkt, ResultPacket):
                key = (dst, pkt.agtr_idx)
                if pkt.round_num == round_num and key in pending:
                    pending.discard(key)
                    if key in uplink_lost:
                        stats["loss_hidden"] += 1
                    by_id[dst].on_result(pkt)
                else:
                    stats["results_after_timeout"] += 1
            elif isinstance(pkt, StragglerNotice):
                stats["notices_received"] += 1
        elif ev.kind == "timeout":
            key = ev.payload
            if key in pending:
                pending.discard(key)
                stats["zero_filled"] += 1
                zero_filled[key[0]].append(key[1])
                by_id[key[0]].on_timeout(round_num, key[1])
    # next round starts strictly after this one's last event
    net.now += 1

    updates = {w.worker_id: w.finish_round(round_num) for w in workers}
    prints = {wid: fingerprint(u) for wid, u in updates.items()}
    return RoundReport(round_num, updates, prints, stragglers, zero_filled, stats)


def periodic_sync(workers: Sequence[SimWorker], period: int, round_num: int) -> bool:
    """Copy worker 0's model to every worker after each ``period`` rounds."""
    if period < 1:
        raise PreconditionError("sync period must be >= 1")
    if (round_num + 1) % period:
        return False
    src = workers[0].model
    for w in workers[1:]:
        w.model = src.copy()
    return True
