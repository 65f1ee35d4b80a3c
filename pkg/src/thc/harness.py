"""End-to-end training rounds and the NMSE / resiliency experiments.

A round for worker ``i``:

1. ``x = grad + e`` (error feedback);
2. report ``||x||`` (or min/max of the rotated vector) and learn the global
   scale;
3. rotate, clamp to ``[m, M]``, quantize against the shared table and send
   packed indices, one packet per chunk;
4. decode the aggregate (zeros for chunks that timed out), rotate back and
   step the model;
5. ``e = x - RHT^-1(X_i)`` where ``X_i`` is the worker's own quantized vector.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from . import hadamard
from .aggregator import PSConfig, ParameterServer, prelim_aggregate
from .codec import (
    EncodedGradient,
    check_width,
    decode_aggregate,
    decode_values,
    encoding_seed,
    min_value_width,
    pack_bits,
    quantize,
    table_lookup_sum,
)
from .errors import PreconditionError, TableNotFoundError
from .hadamard import TransformSeed
from .protocol import MODE_MINMAX, MODE_NORM, MSG_PRELIM_UP, GradientPacket, PrelimPacket, ResultPacket
from .simnet import NetConfig, SimulatedNetwork, StragglerPolicy, periodic_sync, run_round
from .tables import LookupTable, TableKey, load_table, save_table, solve_optimal_table

DEFAULT_CHUNK = 1024
LOGNORMAL_MU = 0.0
LOGNORMAL_SIGMA = 1.0


@dataclass
class RoundContext:
    round: int
    base_seed: int
    n: int
    key: TableKey
    mode: str = "nonuniform"
    prelim: str = "norm"

    @property
    def transform_seed(self) -> TransformSeed:
        return TransformSeed(self.round, self.base_seed)


@dataclass
class WorkerState:
    model: np.ndarray
    error_feedback: np.ndarray = None

    def __post_init__(self):
        self.model = np.asarray(self.model, dtype=np.float64).copy()
        if self.error_feedback is None:
            self.error_feedback = np.zeros_like(self.model)


@functools.lru_cache(maxsize=None)
def _solved(key: TableKey) -> LookupTable:
    return solve_optimal_table(key)


def get_table(b: int, g: int, p, mode: str = "nonuniform", cache=None) -> LookupTable:
    """Table for ``(b, g, p)``: identity in uniform mode, else the optimal one.

    With ``cache`` set, a stored table is reused and a freshly solved one is
    written back.
    """
    p = Fraction(p)
    if mode == "uniform":
        if g != 2**b - 1:
            raise PreconditionError(f"uniform mode needs g = 2**b - 1 = {2**b - 1}")
        return LookupTable.identity(b, p)
    if mode != "nonuniform":
        raise PreconditionError(f"unknown mode {mode!r}")
    key = TableKey(b, g, p)
    if cache is not None:
        try:
            return load_table(cache, key)
        except TableNotFoundError:
            table = _solved(key)
            save_table(cache, table)
            return table
    return _solved(key)


# ---------------------------------------------------------------------------
# Shared encode/decode pipeline


def chunk_bounds(length: int, chunk_size: int) -> list[tuple[int, int]]:
    return [(s, min(s + chunk_size, length)) for s in range(0, length, chunk_size)]


def encode_chunks(x_clamped, m, M, table, base_seed, worker_id, round_num,
                  chunk_size=DEFAULT_CHUNK):
    """Quantize chunk by chunk. Returns (encoded list, own quantized vector)."""
    encoded = []
    own = np.empty(len(x_clamped))
    for c, (s, e) in enumerate(chunk_bounds(len(x_clamped), chunk_size)):
        qv = quantize(x_clamped[s:e], m, M, table, encoding_seed(base_seed, worker_id, round_num, c))
        z = table.inverse()[qv.y]
        encoded.append(EncodedGradient(pack_bits(z, table.b), e - s, table.b, (float(m), float(M)),
                                       round_num, worker_id))
        own[s:e] = qv.x_q
    return encoded, own


def global_scale(xs: Sequence[np.ndarray], ctx: RoundContext, t_p: float):
    """Preliminary stage without a network: returns (m, M) for the round."""
    d = hadamard.next_pow2(len(xs[0]))
    if ctx.prelim == "norm":
        ell = max(float(np.linalg.norm(x)) for x in xs)
        return hadamard.range_from_norm(ell, d, t_p)
    p = float(ctx.key.p)
    lows, highs = zip(*(minmax_report(x, ctx.transform_seed, p) for x in xs))
    return min(lows), max(highs)


def minmax_report(x, seed: TransformSeed, p: float):
    """Extremes of the rotated vector ignoring the outer p-fraction."""
    rotated = hadamard.rht(hadamard.pad_pow2(x)[0], seed)
    return float(np.quantile(rotated, p / 2)), float(np.quantile(rotated, 1 - p / 2))


def _nondegenerate(m, M):
    # an all-zero round has m = M = 0; any range gives the exact answer
    if M > m:
        return m, M
    return m - 1.0, M + 1.0


def direct_average(xs: Sequence[np.ndarray], table: LookupTable, ctx: RoundContext,
                   value_width=None, chunk_size=DEFAULT_CHUNK) -> np.ndarray:
    """Pre-process, encode, aggregate, decode and post-process without a network."""
    t_p = hadamard.compute_tp(float(ctx.key.p))
    m, M = _nondegenerate(*global_scale(xs, ctx, t_p))
    seed = ctx.transform_seed
    width = value_width or min_value_width(table.g, len(xs))
    per_worker = []
    for wid, x in enumerate(xs):
        padded, n = hadamard.pad_pow2(x)
        clamped = hadamard.clamp(hadamard.rht(padded, seed), m, M)
        per_worker.append(encode_chunks(clamped, m, M, table, ctx.base_seed, wid, ctx.round,
                                        chunk_size)[0])
    est = np.concatenate([
        decode_aggregate(table_lookup_sum([enc[c] for enc in per_worker], table, width))
        for c in range(len(per_worker[0]))
    ])
    return hadamard.postprocess(est, seed, len(xs[0]))


# ---------------------------------------------------------------------------
# Workers over the simulated network


class THCWorker:
    """One training worker; the network loop calls its ``on_*`` hooks."""

    def __init__(self, worker_id: int, state: WorkerState, table: LookupTable,
                 grad_fn: Callable[[np.ndarray], np.ndarray], lr: float,
                 chunk_size: int = DEFAULT_CHUNK):
        self.worker_id = worker_id
        self.state = state
        self.table = table
        self.grad_fn = grad_fn
        self.lr = lr
        self.chunk_size = chunk_size
        self.last_update = None

    @property
    def model(self):
        return self.state.model

    @model.setter
    def model(self, value):
        self.state.model = value

    def begin_round(self, ctx: RoundContext, t_p: float) -> PrelimPacket:
        self._ctx = ctx
        self._x = self.grad_fn(self.state.model) + self.state.error_feedback
        if ctx.prelim == "norm":
            return PrelimPacket(MSG_PRELIM_UP, ctx.round, ctx.n, self.worker_id, MODE_NORM,
                                (float(np.linalg.norm(self._x)),))
        lo, hi = minmax_report(self._x, ctx.transform_seed, float(ctx.key.p))
        return PrelimPacket(MSG_PRELIM_UP, ctx.round, ctx.n, self.worker_id, MODE_MINMAX, (lo, hi))

    def set_scale(self, m: float, M: float) -> None:
        ctx = self._ctx
        self._m, self._M = _nondegenerate(m, M)
        padded, _ = hadamard.pad_pow2(self._x)
        clamped = hadamard.clamp(hadamard.rht(padded, ctx.transform_seed), self._m, self._M)
        self._encoded, self._own = encode_chunks(clamped, self._m, self._M, self.table,
                                                 ctx.base_seed, self.worker_id, ctx.round,
                                                 self.chunk_size)
        self._bounds = chunk_bounds(len(padded), self.chunk_size)
        self._estimate = np.zeros(len(padded))

    def outgoing(self, round_num: int) -> list[GradientPacket]:
        return [GradientPacket(round_num, c, self._ctx.n, self.worker_id, e.count, e.bits_per_index,
                               e.indices) for c, e in enumerate(self._encoded)]

    def on_result(self, pkt: ResultPacket) -> None:
        s, e = self._bounds[pkt.agtr_idx]
        self._estimate[s:e] = decode_values(pkt.values(), pkt.num_aggregated, self._m, self._M,
                                            self.table.g)

    def on_timeout(self, round_num: int, chunk: int) -> None:
        s, e = self._bounds[chunk]
        self._estimate[s:e] = 0.0

    def finish_round(self, round_num: int) -> np.ndarray:
        seed = self._ctx.transform_seed
        d = len(self._x)
        update = hadamard.postprocess(self._estimate, seed, d)
        self.state.error_feedback = self._x - hadamard.postprocess(self._own, seed, d)
        self.state.model = self.state.model - self.lr * update
        self.last_update = update
        return update


@dataclass
class Cluster:
    workers: list
    ps: ParameterServer
    net: SimulatedNetwork
    key: TableKey
    base_seed: int = 0
    mode: str = "nonuniform"
    prelim: str = "norm"

    def round(self, r: int):
        """Run preliminary + main stage for round ``r``; returns the RoundReport."""
        n = len(self.workers)
        ctx = RoundContext(r, self.base_seed, n, self.key, self.mode, self.prelim)
        t_p = hadamard.compute_tp(float(self.key.p))
        # the preliminary exchange is small and treated as lossless
        reports = [w.begin_round(ctx, t_p) for w in self.workers]
        scale = prelim_aggregate(reports)
        if scale.mode == MODE_NORM:
            d = hadamard.next_pow2(len(self.workers[0].model))
            m, M = hadamard.range_from_norm(scale.values[0], d, t_p)
        else:
            m, M = scale.values
        for w in self.workers:
            w.set_scale(m, M)
        return run_round(self.workers, self.ps, self.net, r)


# ---------------------------------------------------------------------------
# Objectives


@dataclass
class LeastSquares:
    """f(w) = ||A w - y||^2 / (2N), rows split evenly across workers."""

    A: np.ndarray
    y: np.ndarray
    num_workers: int
    w_star: np.ndarray = field(init=False)
    f_star: float = field(init=False)
    L: float = field(init=False)

    def __post_init__(self):
        N = self.A.shape[0]
        if N % self.num_workers:
            raise PreconditionError("rows must split evenly across workers")
        self.w_star = np.linalg.lstsq(self.A, self.y, rcond=None)[0]
        self.f_star = self.objective(self.w_star)
        self.L = float(np.linalg.eigvalsh(self.A.T @ self.A / N)[-1])
        rows = N // self.num_workers
        self._shards = [(self.A[i * rows:(i + 1) * rows], self.y[i * rows:(i + 1) * rows])
                        for i in range(self.num_workers)]

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    def objective(self, w) -> float:
        r = self.A @ w - self.y
        return float(r @ r) / (2 * self.A.shape[0])

    def gradient(self, w) -> np.ndarray:
        return self.A.T @ (self.A @ w - self.y) / self.A.shape[0]

    def local_gradient(self, i: int, w) -> np.ndarray:
        A, y = self._shards[i]
        return A.T @ (A @ w - y) / A.shape[0]


def make_least_squares(dim=256, num_workers=10, rows_per_worker=64, cond=100.0, noise=0.5,
                       heterogeneity=0.0, seed=0) -> LeastSquares:
    """Random least-squares problem whose Hessian has condition number ~``cond``.

    ``heterogeneity`` perturbs the planted solution per worker shard, so
    local gradients disagree at the global optimum.
    """
    rng = np.random.default_rng(seed)
    N = rows_per_worker * num_workers
    scales = np.logspace(0, -0.5 * math.log10(cond), dim)
    A = rng.standard_normal((N, dim)) * scales
    w_true = rng.standard_normal(dim)
    shift = heterogeneity * rng.standard_normal((num_workers, dim))
    w_rows = w_true + np.repeat(shift, rows_per_worker, axis=0)
    y = np.einsum("ij,ij->i", A, w_rows) + noise * rng.standard_normal(N)
    return LeastSquares(A, y, num_workers)


def synthetic_gradient(kind: str, d: int, rng) -> np.ndarray:
    if kind == "lognormal":
        mag = rng.lognormal(LOGNORMAL_MU, LOGNORMAL_SIGMA, d)
        return mag * rng.choice([-1.0, 1.0], d)
    if kind == "gaussian":
        return rng.standard_normal(d)
    raise PreconditionError(f"unknown gradient source {kind!r}")


# ---------------------------------------------------------------------------
# Experiments


@dataclass
class NMSEResult:
    b: int
    g: int
    p: Fraction
    workers: int
    dim: int
    trials: int
    mean: float
    std: float
    values: np.ndarray

    def row(self) -> dict:
        return {"b": self.b, "g": self.g, "p": str(self.p), "workers": self.workers, "dim": self.dim,
                "trials": self.trials, "nmse_mean": f"{self.mean:.10g}", "nmse_std": f"{self.std:.10g}",
                "lognormal_mu": LOGNORMAL_MU, "lognormal_sigma": LOGNORMAL_SIGMA}


def nmse_experiment(b, g, p, n, d, trials=100, seed=0, value_width=None, table=None,
                    mode="nonuniform", source="lognormal") -> NMSEResult:
    """Average NMSE of compressing ``n`` copies of one random gradient.

    NMSE is ``||x_hat - x||^2 / ||x||^2`` of the decoded average against
    the true average.
    """
    table = table or get_table(b, g, p, mode)
    width = value_width or min_value_width(table.g, n)
    check_width(table.g, n, width)
    key = TableKey(b, g, Fraction(p))
    rng = np.random.default_rng([seed, 0x4E4D])
    vals = np.empty(trials)
    for t in range(trials):
        x = synthetic_gradient(source, d, rng)
        ctx = RoundContext(t, seed, n, key, mode)
        est = direct_average([x] * n, table, ctx, width)
        vals[t] = float(np.sum((est - x) ** 2) / np.sum(x**2))
    return NMSEResult(b, g, Fraction(p), n, d, trials, float(vals.mean()), float(vals.std()), vals)


@dataclass
class ResiliencyConfig:
    workers: int = 10
    b: int = 4
    g: int = 20
    p: Fraction = Fraction(1, 512)
    rounds: int = 500
    lr: float | None = None
    loss_rate: float = 0.0
    stragglers: int = 0
    threshold: float = 1.0
    sync_period: int | None = None
    value_width: int = 8
    chunk_size: int = DEFAULT_CHUNK
    timeout: int = 16
    seed: int = 0
    compress: bool = True
    mode: str = "nonuniform"
    prelim: str = "norm"


TRACE_COLUMNS = ["round", "objective", "gap", "zero_filled", "dropped_up", "dropped_down",
                 "stragglers", "partial", "late_drops", "distinct_models", "synced"]


def resiliency_experiment(problem: LeastSquares, cfg: ResiliencyConfig) -> list[dict]:
    """Train on ``problem`` and return one trace row per round.

    ``objective`` is the mean of f over the workers' models, so diverged
    replicas show up in the trace. With ``compress=False`` the workers
    average exact gradients (the uncompressed baseline; loss and stragglers
    are ignored).
    """
    n = cfg.workers
    lr = cfg.lr if cfg.lr is not None else 0.1 / problem.L
    w0 = np.zeros(problem.dim)
    if not cfg.compress:
        return _baseline_trace(problem, cfg, lr, w0)

    table = get_table(cfg.b, cfg.g, cfg.p, cfg.mode)
    padded = hadamard.next_pow2(problem.dim)
    slots = len(chunk_bounds(padded, cfg.chunk_size))
    ps = ParameterServer(PSConfig(table, n, cfg.value_width, cfg.threshold, slots))
    policy = StragglerPolicy("random", k=cfg.stragglers) if cfg.stragglers else StragglerPolicy()
    net = SimulatedNetwork(NetConfig(cfg.loss_rate, policy, cfg.timeout, 1, cfg.seed))
    workers = [
        THCWorker(i, WorkerState(w0), table, functools.partial(_local_grad, problem, i), lr,
                  cfg.chunk_size)
        for i in range(n)
    ]
    cluster = Cluster(workers, ps, net, table.key, cfg.seed, cfg.mode, cfg.prelim)
    rows = []
    for r in range(cfg.rounds):
        before = net.counts.copy()
        rep = cluster.round(r)
        synced = periodic_sync(workers, cfg.sync_period, r) if cfg.sync_period else False
        obj = float(np.mean([problem.objective(w.model) for w in workers]))
        distinct = len({w.model.tobytes() for w in workers})
        rows.append({
            "round": r, "objective": obj, "gap": obj - problem.f_star,
            "zero_filled": rep.stats["zero_filled"],
            "dropped_up": net.counts["dropped_up"] - before["dropped_up"],
            "dropped_down": net.counts["dropped_down"] - before["dropped_down"],
            "stragglers": len(rep.stragglers), "partial": rep.stats["partial"],
            "late_drops": rep.stats["late_drops"], "distinct_models": distinct,
            "synced": int(synced),
        })
    return rows


def _local_grad(problem, i, w):
    return problem.local_gradient(i, w)


def _baseline_trace(problem, cfg, lr, w0):
    w = w0.copy()
    rows = []
    for r in range(cfg.rounds):
        g = np.mean([problem.local_gradient(i, w) for i in range(cfg.workers)], axis=0)
        w = w - lr * g
        obj = problem.objective(w)
        rows.append({"round": r, "objective": obj, "gap": obj - problem.f_star, "zero_filled": 0,
                     "dropped_up": 0, "dropped_down": 0, "stragglers": 0, "partial": 0,
                     "late_drops": 0, "distinct_models": 1, "synced": 0})
    return rows


def final_value(rows, column="gap", window=1) -> float:
    """Mean of ``column`` over the last ``window`` rounds."""
    return float(np.mean([r[column] for r in rows[-window:]]))
