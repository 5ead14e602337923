"""Command-line entry point: ``balancer allocate | simulate | timing``.

Exit codes: 0 success, 2 bad input or configuration, 3 allocator or
numerical failure, 130 interrupted.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import simlab
from .allocators import CamParams, RerandParams, allocate_cam, allocate_cr, allocate_rr
from .balance import mahalanobis
from .errors import BalancerError, InvalidInput, NoRoot
from .files import (ARM_MAPPING, InputFormatError, read_units_csv, write_allocation_csv,
                    write_json)
from .model import estimate_covariance
from .theory import TimeRatioParams, chi2_cdf, solve_a_star

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_ALLOCATOR = 3
EXIT_INTERRUPTED = 130

SEED_ENV = "BALANCER_SEED"
EXPERIMENTS = ("figure1", "figure2", "figure3", "figure4", "table3", "surrogate")
CELL_COLUMNS = ("rep", "m", "tau_hat", "tau_tilde", "iterations", "failed")


class ConfigError(BalancerError):
    pass


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _seed(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be a non-negative integer, got {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"seed must be a non-negative integer, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="balancer", description="Covariate-balanced treatment allocation.")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON file of flag defaults (keys are flag names)")

    a = sub.add_parser("allocate", parents=[common], help="allocate units from a CSV table")
    a.add_argument("input", type=Path, nargs="?", help="CSV: unit_id, then numeric covariates")
    a.add_argument("--method", choices=("cam", "cr", "rr"), default="cam")
    a.add_argument("--q", type=float, default=0.75, help="CAM biased-coin probability, in (0.5, 1)")
    g = a.add_mutually_exclusive_group()
    g.add_argument("--pa", type=float, help="RR acceptance probability")
    g.add_argument("--a", type=float, dest="threshold", help="RR threshold on M")
    a.add_argument("--max-iters", type=_positive_int, default=1_000_000)
    a.add_argument("--no-shuffle", action="store_true", help="CAM: keep the file order")
    a.add_argument("--ridge", choices=("auto", "forbid"), default="auto")
    a.add_argument("--seed", type=_seed)
    a.add_argument("--out", type=Path, help="allocation CSV (default: <input>.alloc.csv)")

    s = sub.add_parser("simulate", parents=[common], help="run a Monte Carlo experiment")
    s.add_argument("experiment", nargs="?", help="one of: " + ", ".join(EXPERIMENTS))
    s.add_argument("--reps", type=_positive_int)
    s.add_argument("--seed", type=_seed)
    s.add_argument("--jobs", type=_positive_int, default=1)
    s.add_argument("--n", type=_positive_int, nargs="+", dest="ns", help="sample sizes")
    s.add_argument("--p", type=_positive_int, nargs="+", dest="ps", help="covariate counts")
    s.add_argument("--pa", type=float, help="RR acceptance probability (figure1, figure4)")
    s.add_argument("--replicate", type=_positive_int, default=1, help="surrogate: stack the table k times")
    s.add_argument("--out", type=Path, help="output directory (default: ./results/<experiment>)")

    t = sub.add_parser("timing", parents=[common], help="CAM / rerandomization time-ratio grid")
    t.add_argument("--n", type=float, nargs="+", dest="ns", default=[200, 400, 600])
    t.add_argument("--p", type=_positive_int, nargs="+", dest="ps", default=[2, 4, 6, 8, 10, 12])
    t.add_argument("--C", type=float, default=10.0)
    t.add_argument("--R", type=float, default=1.0)
    t.add_argument("--D", type=float, default=5.0)
    t.add_argument("--out", type=Path, help="write the grid as CSV")
    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._subparsers._group_actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _apply_config(parser: argparse.ArgumentParser, args: argparse.Namespace, argv) -> argparse.Namespace:
    """Reparse with values from ``--config`` as defaults; flags still win."""
    path = args.config
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"{path}: cannot open ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}, line {exc.lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    sp = _subparser(parser, args.command)
    known = {act.dest: act for act in sp._actions if act.dest not in ("help", "config")}
    aliases = {opt.lstrip("-").replace("-", "_"): act.dest
               for act in known.values() for opt in act.option_strings}
    aliases.update({d: d for d in known})
    defaults = {}
    for key, value in data.items():
        dest = aliases.get(key.replace("-", "_"))
        if dest is None:
            raise ConfigError(f"{path}: unknown key {key!r} for '{args.command}'")
        act = known[dest]
        if act.type is not None and value is not None:
            try:
                if act.nargs in ("+", "*"):
                    value = [act.type(str(v)) for v in (value if isinstance(value, list) else [value])]
                else:
                    value = act.type(str(value))
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise ConfigError(f"{path}: key {key!r}: {exc}") from None
        if act.choices is not None and value not in act.choices:
            raise ConfigError(f"{path}: key {key!r} must be one of {sorted(act.choices)}")
        defaults[dest] = value
    sp.set_defaults(**defaults)
    return parser.parse_args(argv)


def resolve_seed(seed: int | None) -> tuple[int, str]:
    if seed is not None:
        return seed, "flag"
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            v = int(env)
            if v < 0:
                raise ValueError
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={env!r} is not a non-negative integer") from None
        return v, "env"
    return int(np.random.SeedSequence().entropy % (2 ** 63)), "random"


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "" if math.isnan(v) else repr(v)


# ---------------------------------------------------------------------------
# allocate
# ---------------------------------------------------------------------------

def cmd_allocate(args) -> int:
    if args.input is None:
        raise ConfigError("allocate needs an input CSV")
    table = read_units_csv(args.input)
    seed, seed_source = resolve_seed(args.seed)
    try:
        cov = estimate_covariance(table, ridge_policy=args.ridge)
        iterations = 1
        if args.method == "cam":
            alloc, _ = allocate_cam(table, cov, CamParams(q=args.q, seed=seed, shuffle=not args.no_shuffle))
        elif args.method == "rr":
            if args.pa is None and args.threshold is None:
                raise InvalidInput("rr needs --pa or --a")
            params = RerandParams(threshold=args.threshold, acceptance=args.pa,
                                  max_iters=args.max_iters, seed=seed)
            alloc, iterations = allocate_rr(table, cov, params)
        else:
            alloc = allocate_cr(table, seed)
        m = mahalanobis(table, cov, alloc)
    except InvalidInput:
        raise
    except BalancerError as exc:
        print(f"balancer: allocation failed: {exc}", file=sys.stderr)
        return EXIT_ALLOCATOR

    out = args.out or args.input.with_suffix(".alloc.csv")
    sidecar = out.with_suffix(".json")
    try:
        write_allocation_csv(out, table, alloc)
        n1, n2 = alloc.group_sizes()
        write_json(sidecar, {
            "command": "allocate",
            "input": str(args.input),
            "method": alloc.method,
            "params": dict(alloc.params),
            "seed": seed,
            "seed_source": seed_source,
            "n": table.n,
            "p": table.p,
            "columns": list(table.columns),
            "m_final": m,
            "group_sizes": {"1": n1, "2": n2},
            "applied_lambda": cov.regularization,
            "iterations": iterations,
            "arm_mapping": ARM_MAPPING,
        })
    except OSError as exc:
        raise InputFormatError(f"{out}: cannot write ({exc.strerror})") from None
    print(f"{alloc.method}: n={table.n} p={table.p} arms={n1}/{n2} M={m:.6g} -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

class _CellWriter:
    """Writes each finished cell to CSV and remembers what was written."""

    def __init__(self, outdir: Path):
        self.outdir = outdir
        self.cells: list[simlab.CellResult] = []
        self.files: list[str] = []

    def __call__(self, cell: simlab.CellResult) -> None:
        safe = "".join(ch if ch.isalnum() or ch in "._-" else "_" for ch in cell.allocator)
        name = f"n{cell.n}_p{cell.p}_{safe}.csv"
        with open(self.outdir / name, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CELL_COLUMNS)
            rec = cell.records
            for i in range(cell.reps):
                w.writerow([str(i)] + [_fmt(rec[k][i]) for k in CELL_COLUMNS[1:]])
        self.cells.append(cell)
        self.files.append(name)


def _fit_dict(fit: simlab.ConvergenceFit) -> dict:
    return {"slope": fit.slope, "intercept": fit.intercept, "r2": fit.r2,
            "intercept_se": fit.intercept_se, "intercept_se_regression": fit.intercept_se_regression}


def _run_simulation(name: str, args, seed: int, writer: _CellWriter) -> tuple[dict, list[str]]:
    """Dispatch to simlab; returns (summary payload, headline lines)."""
    reps = args.reps
    jobs = args.jobs
    lines = []
    if name == "table3":
        res = simlab.table3_experiment(reps=reps or 2000, seed=seed, jobs=jobs, n=(args.ns or [5000])[0],
                                       on_cell=writer)
        lines.append(f"{'method':<6} {'estimator':<10} {'n*Var':>10} {'MC-SE':>8}")
        for m, e, v, se in res.rows():
            lines.append(f"{m:<6} {e:<10} {v:>10.3f} {se:>8.3f}")
        return {"n": res.n, "reps": res.reps,
                "cells": [{"method": m, "estimator": e, "n_var": v, "se": se} for m, e, v, se in res.rows()]}, lines
    if name == "figure3":
        ns = tuple(args.ns or (100, 200, 400, 800))
        results, fits = simlab.figure3_experiment(ns=ns, ps=tuple(args.ps or (4,)), reps=reps or 2000,
                                                  seed=seed, jobs=jobs, on_cell=writer)
        lines.append(f"{'p':>3} {'n':>6} {'1/n':>10} {'E[M]':>9} {'SE':>8}")
        points = []
        for c in results:
            mean, se = c.mean("m")
            points.append({"n": c.n, "p": c.p, "inv_n": 1.0 / c.n, "mean_m": mean, "se": se})
            lines.append(f"{c.p:>3} {c.n:>6} {1.0 / c.n:>10.5f} {mean:>9.5f} {se:>8.5f}")
        for p, fit in fits.items():
            lines.append(f"p={p}: E[M] = {fit.intercept:.5f} + {fit.slope:.4f}/n  "
                         f"(r2={fit.r2:.5f}, intercept SE={fit.intercept_se:.5f})")
        return {"points": points, "fits": {str(p): _fit_dict(f) for p, f in fits.items()}}, lines
    if name == "figure1":
        results, hists = simlab.figure1_experiment(
            ns=tuple(args.ns or (50, 100, 500, 1000)), ps=tuple(args.ps or (2, 5, 10)),
            reps=reps or 1000, seed=seed, acceptance=args.pa or 0.3, jobs=jobs, on_cell=writer)
        lines.append(f"{'alloc':<12} {'n':>6} {'p':>3} {'mean M':>9} {'median M':>9}")
        for c in results:
            vals = c.values("m")
            lines.append(f"{c.allocator:<12} {c.n:>6} {c.p:>3} {vals.mean():>9.4f} {np.median(vals):>9.4f}")
        return {"histograms": [{"n": n, "p": p, "allocator": a, **h} for (n, p, a), h in hists.items()]}, lines
    if name == "figure4":
        kw = {}
        if args.ns:
            kw["ns"] = tuple(args.ns)
        if args.ps:
            kw["ps"] = tuple(args.ps)
        spec = simlab.figure4_spec(reps=reps or 2000, seed=seed, acceptance=args.pa or 0.1, **kw)
        surface = simlab.priv_surface(spec, jobs=jobs, on_cell=writer)
        lines.append(f"{'alloc':<12} {'n':>6} {'p':>3} {'PRIV':>8} {'SE':>6}")
        for (n, p, a), (v, se) in surface.items():
            lines.append(f"{a:<12} {n:>6} {p:>3} {v:>8.2f} {se:>6.2f}")
        return {"priv": [{"n": n, "p": p, "allocator": a, "priv": v, "se": se}
                         for (n, p, a), (v, se) in surface.items()]}, lines
    if name == "surrogate":
        rows = simlab.surrogate_experiment(replicate=args.replicate, reps=reps or 2000, seed=seed,
                                           jobs=jobs, on_cell=writer)
        lines.append(f"{'alloc':<12} {'n':>5} {'MSE':>9} {'SE':>8} {'PRIV':>7}")
        for r in rows:
            pv = f"{r['priv']:7.2f}" if "priv" in r else "      -"
            lines.append(f"{r['allocator']:<12} {r['n']:>5} {r['mse']:>9.5f} {r['mse_se']:>8.5f} {pv}")
        return {"rows": rows}, lines
    if name == "figure2":
        grid = tuple(zip(args.ns, args.ps)) if args.ns and args.ps else ((100, 2), (200, 4), (400, 6))
        rows = simlab.figure2_experiment(grid=grid, reps=reps or 100, seed=seed)
        lines.append(f"{'n':>5} {'p':>3} {'threshold':>10} {'RR iters':>9} {'t_CAM/t_RR':>11}")
        for r in rows:
            lines.append(f"{r['n']:>5} {r['p']:>3} {r['threshold']:>10.4f} "
                         f"{r['median_iterations']:>9.0f} {r['time_ratio']:>11.4f}")
        return {"rows": rows}, lines
    raise ConfigError(f"unknown experiment {name!r}")


def cmd_simulate(args) -> int:
    if args.experiment not in EXPERIMENTS:
        got = "none given" if args.experiment is None else repr(args.experiment)
        raise ConfigError(f"unknown experiment ({got}); valid names: {', '.join(EXPERIMENTS)}")
    if args.pa is not None and not (0.0 < args.pa < 1.0):
        raise ConfigError(f"--pa must lie in (0, 1), got {args.pa}")
    seed, seed_source = resolve_seed(args.seed)
    outdir = args.out or Path("results") / args.experiment
    try:
        outdir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"{outdir}: cannot create output directory ({exc.strerror})") from None
    writer = _CellWriter(outdir)
    header = {"command": "simulate", "experiment": args.experiment, "seed": seed,
              "seed_source": seed_source, "reps": args.reps, "jobs": args.jobs}
    try:
        payload, lines = _run_simulation(args.experiment, args, seed, writer)
    except KeyboardInterrupt:
        _write_manifest(outdir, header, writer, "interrupted")
        print(f"balancer: interrupted; partial results in {outdir}", file=sys.stderr)
        return EXIT_INTERRUPTED
    except InvalidInput:
        raise
    except BalancerError as exc:
        _write_manifest(outdir, header, writer, f"failed: {exc}")
        print(f"balancer: simulation failed: {exc}", file=sys.stderr)
        return EXIT_ALLOCATOR
    write_json(outdir / "summary.json", {
        **header,
        "cells": [{"file": f, **c.aggregates(), "wall_time": c.timing()}
                  for f, c in zip(writer.files, writer.cells)],
        "result": payload,
    })
    print("\n".join(lines))
    return EXIT_OK


def _write_manifest(outdir: Path, header: dict, writer: _CellWriter, status: str) -> None:
    write_json(outdir / "failure_manifest.json", {
        **header, "status": status,
        "completed_cells": [{"file": f, "n": c.n, "p": c.p, "allocator": c.allocator}
                            for f, c in zip(writer.files, writer.cells)],
    })


# ---------------------------------------------------------------------------
# timing
# ---------------------------------------------------------------------------

def cmd_timing(args) -> int:
    rows = []
    for n in args.ns:
        for p in args.ps:
            params = TimeRatioParams(n=n, p=p, C=args.C, R=args.R, D=args.D)
            try:
                sol = solve_a_star(params)
                ratio = float(chi2_cdf(p, sol.a_star)) * params.C * p / params.R
                rows.append((n, p, sol.a_star, ratio, False))
            except NoRoot:
                rows.append((n, p, math.nan, math.nan, True))
    print(f"{'n':>7} {'p':>3} {'a*':>12} {'ratio':>12}")
    for n, p, a, r, flagged in rows:
        if flagged:
            print(f"{n:>7g} {p:>3} {'no root':>12} {'-':>12}")
        else:
            print(f"{n:>7g} {p:>3} {a:>12.6g} {r:>12.4g}")
    if args.out is not None:
        try:
            with open(args.out, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(("n", "p", "a_star", "ratio", "no_root"))
                for n, p, a, r, flagged in rows:
                    w.writerow((_fmt(n), p, _fmt(a), _fmt(r), int(flagged)))
        except OSError as exc:
            raise ConfigError(f"{args.out}: cannot write ({exc.strerror})") from None
    return EXIT_OK


COMMANDS = {"allocate": cmd_allocate, "simulate": cmd_simulate, "timing": cmd_timing}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.config is not None:
            try:
                args = _apply_config(parser, args, argv)
            except SystemExit as exc:
                return int(exc.code or 0)
        return COMMANDS[args.command](args)
    except (InputFormatError, ConfigError, InvalidInput) as exc:
        print(f"balancer: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except BalancerError as exc:
        print(f"balancer: {exc}", file=sys.stderr)
        return EXIT_ALLOCATOR
    except KeyboardInterrupt:
        return EXIT_INTERRUPTED


if __name__ == "__main__":
    sys.exit(main())
