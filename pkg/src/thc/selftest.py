"""Fast consistency checks runnable from an installed package (``thc selftest``)."""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from . import hadamard
from .aggregator import Multicast, PSConfig, ParameterServer
from .codec import decode_aggregate, decode_self, table_lookup_sum, thc_encode
from .hadamard import TransformSeed
from .protocol import GradientPacket, parse, serialize
from .tables import TableKey, solve_optimal_table


def _rht_roundtrip():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(1 << 12)
    seed = TransformSeed(3, 7)
    y = hadamard.rht(x, seed)
    assert np.allclose(hadamard.rht_inverse(y, seed), x, rtol=0, atol=1e-12)
    assert abs(np.linalg.norm(y) / np.linalg.norm(x) - 1) < 1e-12


def _homomorphism():
    rng = np.random.default_rng(2)
    table = solve_optimal_table(TableKey(3, 12, Fraction(1, 32)))
    m, M = -1.0, 1.0
    xs = [rng.uniform(m, M, 256) for _ in range(8)]
    enc = [thc_encode(x, m, M, table, (0, i)) for i, x in enumerate(xs)]
    avg = decode_aggregate(table_lookup_sum(enc, table, 8))
    direct = np.mean([decode_self(e, table) for e in enc], axis=0)
    assert np.allclose(avg, direct, rtol=1e-12, atol=1e-12)


def _wire_roundtrip():
    pkt = GradientPacket.from_indices(np.arange(16) % 16, 4, 5, 2, 10, 3)
    assert parse(serialize(pkt)) == pkt


def _aggregator():
    table = solve_optimal_table(TableKey(2, 4, Fraction(1, 32)))
    ps = ParameterServer(PSConfig(table, 3, 8, 1.0))
    actions = [ps.process_packet(GradientPacket.from_indices([0, 3], 2, 0, 0, 3, w))
               for w in range(3)]
    assert isinstance(actions[-1], Multicast)
    assert list(actions[-1].result.values()) == [0, 12]


CHECKS = [
    ("rht roundtrip", _rht_roundtrip),
    ("homomorphic decode", _homomorphism),
    ("wire roundtrip", _wire_roundtrip),
    ("aggregator completion", _aggregator),
]


def run_all(report=print) -> int:
    failures = 0
    for name, fn in CHECKS:
        try:
            fn()
            report(f"PASS {name}")
        except Exception as exc:  # noqa: BLE001 - report every failure kind
            failures += 1
            report(f"FAIL {name}: {exc!r}")
    return failures
