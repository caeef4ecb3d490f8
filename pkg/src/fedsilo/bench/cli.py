"""``bench`` command line: run, grid, hetero, dp-sweep."""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

from ..data import DatasetError, load_csv
from ..heterogeneity import heterogeneity_report, pairwise_logrank
from .config import ConfigError, load_config
from .runner import (
    DP_COLUMNS,
    GridSearchError,
    dp_sweep,
    emit_grid,
    emit_records,
    emit_results,
    emit_timings,
    grid_search,
    run_benchmark,
    write_warnings,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ALL_FAILED = 3


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seeds is not None:
        cfg = cfg.with_seeds(args.seeds)
    out = _out_dir(args.out)
    notes = []
    if any(e.grid for e in cfg.strategies):
        grid = grid_search(cfg, select_on=args.select_on, jobs=args.jobs)
        cfg = grid.resolved(cfg)
        notes += grid.notes
        notes += [f"grid selected {name}: {json.dumps(p, sort_keys=True)}" for name, p in grid.best.items()]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        table = run_benchmark(cfg, jobs=args.jobs)
    emit_results(table, out / "results.csv", "csv")
    emit_results(table, out / "results.json", "json")
    emit_timings(table, out / "timings.csv")
    write_warnings(notes + table.notes, out / "warnings.log")
    means = [r for r in table.rows if r.client_id == "mean"]
    if means and all(r.status != "ok" for r in means):
        print("all cells failed", file=sys.stderr)
        return EXIT_ALL_FAILED
    for name in table.strategies:
        print(f"{name:>24s}  {table.seed_mean(name):.4f}")
    return EXIT_OK


def cmd_grid(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args.out)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            result = grid_search(cfg, select_on=args.select_on, jobs=args.jobs)
    except GridSearchError as exc:
        write_warnings([str(exc)], out / "warnings.log")
        print(exc, file=sys.stderr)
        return EXIT_ALL_FAILED
    emit_grid(result, out / "results.csv", "csv")
    emit_grid(result, out / "results.json", "json")
    (out / "best.json").write_text(json.dumps(result.best, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    write_warnings(result.notes, out / "warnings.log")
    for name, point in result.best.items():
        print(f"{name}: {json.dumps(point, sort_keys=True)}")
    return EXIT_OK


def cmd_hetero(args) -> int:
    try:
        fed = load_csv(args.data)
    except (DatasetError, OSError) as exc:
        raise ConfigError(str(exc)) from None
    out = _out_dir(args.out)
    notes = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        report = heterogeneity_report(fed, seed=args.seed)
    notes += [str(w.message) for w in caught]
    ids = [c.client_id for c in fed.clients]
    for key, mat in report.matrices.items():
        mat.to_csv(out / f"{key.replace('/', '_')}.csv", ids)
    if fed.task == "survival":
        p = pairwise_logrank(fed)
        rows = [{"client_a": ids[i], "client_b": ids[j], "p_value": float(p[i, j])}
                for i in range(len(ids)) for j in range(i + 1, len(ids))]
        emit_records(rows, ("client_a", "client_b", "p_value"), out / "logrank.csv", "csv")
    summary = report.summary()
    emit_records([summary], tuple(summary), out / "results.csv", "csv")
    emit_records([summary], tuple(summary), out / "results.json", "json")
    write_warnings(notes, out / "warnings.log")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_dp_sweep(args) -> int:
    cfg = load_config(args.config)
    if args.seeds is not None:
        cfg = cfg.with_seeds(args.seeds)
    try:
        sigmas = [float(s) for s in args.sigmas.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"bad --sigmas {args.sigmas!r}") from None
    if not sigmas or any(s <= 0 for s in sigmas):
        raise ConfigError("--sigmas needs positive noise multipliers")
    out = _out_dir(args.out)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rows = dp_sweep(cfg, sigmas)
    emit_records(rows, DP_COLUMNS, out / "results.csv", "csv")
    emit_records(rows, DP_COLUMNS, out / "results.json", "json")
    write_warnings([], out / "warnings.log")
    for r in rows:
        print(f"sigma={r['sigma']:g} eps={r['epsilon']:.3f} metric={r['metric_mean']:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bench", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="pooled/local/strategy matrix over seeds")
    p.add_argument("--config", required=True, help="config file or shipped config name")
    p.add_argument("--seeds", type=int, help="use seeds 0..N-1 instead of the config's list")
    p.add_argument("--out", default="bench_out")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--select-on", choices=("validation", "test"), default="validation",
                   help="selection split for strategies that still carry a grid")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("grid", help="grid search over strategy hyperparameters")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="bench_out")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--select-on", choices=("validation", "test"), default="validation")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("hetero", help="heterogeneity report for a federated CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="bench_out")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_hetero)

    p = sub.add_parser("dp-sweep", help="DP-FedAvg over noise multipliers")
    p.add_argument("--config", required=True)
    p.add_argument("--sigmas", default="0.5,1,2,4")
    p.add_argument("--seeds", type=int)
    p.add_argument("--out", default="bench_out")
    p.set_defaults(func=cmd_dp_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "jobs", 1) < 1:
        print("--jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
