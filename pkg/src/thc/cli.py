"""Command line entry point: ``thc table|nmse|simulate|selftest``.

CSV columns
-----------
nmse:      b, g, p, workers, dim, trials, nmse_mean, nmse_std, lognormal_mu, lognormal_sigma
simulate:  round, objective, gap, zero_filled, dropped_up, dropped_down, stragglers,
           partial, late_drops, distinct_models, synced
"""

from __future__ import annotations

import argparse
import csv
import sys
from fractions import Fraction

from . import __version__
from .errors import THCError
from .harness import (
    TRACE_COLUMNS,
    ResiliencyConfig,
    make_least_squares,
    nmse_experiment,
    resiliency_experiment,
)
from .tables import TableKey, count_tables, read_cache, save_table, solve_optimal_table

NMSE_COLUMNS = ["b", "g", "p", "workers", "dim", "trials", "nmse_mean", "nmse_std",
                "lognormal_mu", "lognormal_sigma"]


def _fraction(text: str) -> Fraction:
    try:
        p = Fraction(text)
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"expected a fraction like 1/32, got {text!r}")
    if not 0 < p < 1:
        raise argparse.ArgumentTypeError(f"p must lie in (0, 1), got {text}")
    return p


def _table_args(p: argparse.ArgumentParser, bits=4, granularity=30, frac="1/32"):
    p.add_argument("--bits", "-b", type=int, default=bits)
    p.add_argument("--granularity", "-g", type=int, default=granularity)
    p.add_argument("--p", type=_fraction, default=Fraction(frac), help="p-fraction, e.g. 1/32")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="thc", description="Homomorphic gradient compression toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    table = sub.add_parser("table", help="solve or inspect lookup tables")
    tsub = table.add_subparsers(dest="table_command", required=True)
    gen = tsub.add_parser("gen", help="solve the optimal table for (b, g, p)")
    _table_args(gen)
    gen.add_argument("--search", choices=["auto", "full", "symmetric", "dp"], default="auto")
    gen.add_argument("--out", help="append/replace the table in this cache file")
    gen.add_argument("--verbose", "-v", action="store_true", help="also print variance and t_p")
    show = tsub.add_parser("show", help="list the tables stored in a cache file")
    show.add_argument("path")

    nmse = sub.add_parser("nmse", help="NMSE of compressing replicated log-normal gradients")
    _table_args(nmse, 4, 38, "1/64")
    nmse.add_argument("--workers", "-n", type=int, nargs="+", default=[4])
    nmse.add_argument("--dim", "-d", type=int, default=1 << 14)
    nmse.add_argument("--trials", type=int, default=100)
    nmse.add_argument("--seed", type=int, default=0)
    nmse.add_argument("--uniform", action="store_true", help="identity table, g = 2**b - 1")
    nmse.add_argument("--csv", help="write rows here instead of stdout")

    sim = sub.add_parser("simulate", help="least-squares training over the lossy network")
    _table_args(sim, 4, 20, "1/512")
    sim.add_argument("--workers", "-n", type=int, default=10)
    sim.add_argument("--loss", type=float, default=0.0)
    sim.add_argument("--stragglers", type=int, default=0, help="random stragglers per round")
    sim.add_argument("--threshold", type=float, default=1.0, help="partial aggregation fraction")
    sim.add_argument("--sync", type=int, default=0, help="sync period in rounds (0 = never)")
    sim.add_argument("--rounds", type=int, default=500)
    sim.add_argument("--dim", type=int, default=256)
    sim.add_argument("--cond", type=float, default=100.0, help="Hessian condition number")
    sim.add_argument("--heterogeneity", type=float, default=3.0,
                     help="spread of the per-worker optima (0 = identical shards)")
    sim.add_argument("--chunk", type=int, default=32, help="coordinates per packet")
    sim.add_argument("--value-width", type=int, default=8)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--baseline", action="store_true", help="exact averaging, no compression")
    sim.add_argument("--csv", help="write rows here instead of stdout")

    sub.add_parser("selftest", help="quick built-in consistency checks")
    return parser


def _writer(path):
    if path:
        return open(path, "w", newline="")
    return sys.stdout


def _emit(path, columns, rows):
    fh = _writer(path)
    try:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    finally:
        if fh is not sys.stdout:
            fh.close()


def cmd_table_gen(args) -> int:
    key = TableKey(args.bits, args.granularity, args.p)
    table = solve_optimal_table(key, search=args.search)
    print(" ".join(str(v) for v in table.values))
    if args.verbose:
        print(f"variance {table.variance:.17g}  t_p {table.t_p:.17g}  "
              f"candidates {count_tables(key.b, key.g)}")
    if args.out:
        save_table(args.out, table)
    return 0


def cmd_table_show(args) -> int:
    for t in read_cache(args.path):
        print(f"b={t.b} g={t.g} p={t.key.p} variance={t.variance:.6g}: "
              + " ".join(str(v) for v in t.values))
    return 0


def cmd_nmse(args) -> int:
    mode = "uniform" if args.uniform else "nonuniform"
    rows = []
    for n in args.workers:
        res = nmse_experiment(args.bits, args.granularity, args.p, n, args.dim, args.trials,
                              args.seed, mode=mode)
        rows.append(res.row())
    _emit(args.csv, NMSE_COLUMNS, rows)
    return 0


def cmd_simulate(args) -> int:
    problem = make_least_squares(dim=args.dim, num_workers=args.workers, cond=args.cond,
                                 heterogeneity=args.heterogeneity, seed=args.seed)
    cfg = ResiliencyConfig(
        workers=args.workers, b=args.bits, g=args.granularity, p=args.p, rounds=args.rounds,
        loss_rate=args.loss, stragglers=args.stragglers, threshold=args.threshold,
        sync_period=args.sync or None, value_width=args.value_width, chunk_size=args.chunk,
        seed=args.seed, compress=not args.baseline,
    )
    _emit(args.csv, TRACE_COLUMNS, resiliency_experiment(problem, cfg))
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_all

    failures = run_all(print)
    return 1 if failures else 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        ("table", "gen"): cmd_table_gen,
        ("table", "show"): cmd_table_show,
        ("nmse", None): cmd_nmse,
        ("simulate", None): cmd_simulate,
        ("selftest", None): cmd_selftest,
    }
    handler = handlers[(args.command, getattr(args, "table_command", None))]
    try:
        return handler(args)
    except (THCError, ValueError, OSError) as exc:
        print(f"thc: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
