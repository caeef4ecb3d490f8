"""Benchmark matrix: pooled and local baselines plus FL strategies over seeds."""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..data import ClientDataset, FederatedDataset, Split
from ..models import DivergedError
from ..privacy import PrivacyParams, dp_fedavg_train
from ..strategies import (
    RoundBudgetError,
    compute_round_budget,
    evaluate_federated,
    train_local,
    train_pooled,
    train_strategy,
)
from .config import BenchConfig, ConfigError, StrategyEntry

VALIDATION_STREAM = 3
RESULT_COLUMNS = ("strategy", "seed", "client_id", "metric", "value", "t_max", "status")


@dataclass
class ResultRow:
    strategy: str
    seed: int
    client_id: str
    metric: str
    value: Optional[float]
    t_max: Optional[int]
    status: str = "ok"
    wall_clock: float = 0.0


@dataclass
class ResultsTable:
    rows: list[ResultRow] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def mean_rows(self, strategy: str) -> list[ResultRow]:
        return [r for r in self.rows if r.strategy == strategy and r.client_id == "mean"]

    def seed_mean(self, strategy: str) -> float:
        """Average over seeds of the uniform client mean; NaN if every cell failed."""
        vals = [r.value for r in self.mean_rows(strategy) if r.value is not None]
        return float(np.mean(vals)) if vals else math.nan

    def local_mean(self) -> float:
        names = sorted({r.strategy for r in self.rows if r.strategy.startswith("local_")})
        vals = [self.seed_mean(n) for n in names]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def failed(self) -> list[ResultRow]:
        return [r for r in self.rows if r.status != "ok"]

    @property
    def strategies(self) -> list[str]:
        return list(dict.fromkeys(r.strategy for r in self.rows))


# ---------------------------------------------------------------------------
# Cells
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Cell:
    kind: str  # "pooled" | "local" | "strategy"
    seed: int
    client: int = -1
    entry: Optional[StrategyEntry] = None
    point: Optional[dict] = None

    @property
    def label(self) -> str:
        if self.kind == "pooled":
            return "pooled"
        if self.kind == "local":
            return f"local_{self.client}"
        return self.entry.name


def _eval_rows(label, seed, metric, model, params, fed, t_max, wall):
    ev = evaluate_federated(model, params, fed, metric)
    rows = [ResultRow(label, seed, c.client_id, metric, v, t_max, "ok" if v is not None else "undefined", wall)
            for c, v in zip(fed.clients, ev.values)]
    rows.append(ResultRow(label, seed, "mean", metric,
                          None if math.isnan(ev.mean) else ev.mean, t_max, "ok", wall))
    return rows, ev.warnings


def _failed_rows(label, seed, metric, t_max, exc):
    return [ResultRow(label, seed, "mean", metric, None, t_max, f"failed: {exc}")]


def run_cell(cfg: BenchConfig, fed: FederatedDataset, cell: Cell, t_max: Optional[int],
             budget_error: Optional[str] = None):
    model = cfg.build_model(fed)
    label = cell.label
    if cell.kind == "local":
        label = f"local_{fed.clients[cell.client].client_id}"
    try:
        if cell.kind == "pooled":
            res = train_pooled(fed, model, cfg.lr, cfg.batch_size, cfg.n_epochs_pooled, cell.seed)
            return _eval_rows(label, cell.seed, cfg.metric, model, res.params, fed, None, res.wall_clock)
        if cell.kind == "local":
            res = train_local(fed, cell.client, model, cfg.lr, cfg.batch_size, cfg.n_epochs_pooled,
                              cell.seed)
            return _eval_rows(label, cell.seed, cfg.metric, model, res.params, fed, None, res.wall_clock)
        if budget_error is not None:
            raise RoundBudgetError(budget_error)
        scfg = cell.entry.config(cell.point, cfg.batch_size, cfg.local_updates, cell.seed, t_max)
        res = train_strategy(fed, model, scfg)
        return _eval_rows(label, cell.seed, cfg.metric, model, res.params, fed, t_max, res.wall_clock)
    except (DivergedError, RoundBudgetError, ValueError) as exc:
        msg = f"{label} seed={cell.seed}: {exc}"
        return _failed_rows(label, cell.seed, cfg.metric, t_max, exc), [msg]


def _round_budget(cfg, fed):
    try:
        return compute_round_budget(cfg.n_epochs_pooled, fed.n_train, fed.n_clients, cfg.batch_size,
                                    cfg.local_updates), None
    except RoundBudgetError as exc:
        return None, str(exc)


def _run_cells(cfg, fed, cells, t_max, budget_error, jobs):
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(run_cell, cfg, fed, c, t_max, budget_error) for c in cells]
            return [f.result() for f in futures]
    return [run_cell(cfg, fed, c, t_max, budget_error) for c in cells]


def benchmark_cells(cfg: BenchConfig, fed: FederatedDataset) -> list[Cell]:
    cells = []
    for seed in cfg.seeds:
        cells.append(Cell("pooled", seed))
        cells.extend(Cell("local", seed, k) for k in range(fed.n_clients))
        for entry in cfg.strategies:
            if entry.grid:
                raise ConfigError(f"strategy {entry.name!r} still has a grid; run grid_search first")
            cells.append(Cell("strategy", seed, entry=entry, point=entry.points()[0]))
    return cells


def run_benchmark(cfg: BenchConfig, fed: Optional[FederatedDataset] = None, jobs: int = 1) -> ResultsTable:
    """Every seed trains the pooled baseline, one local baseline per client and
    each strategy (with T_max rounds). Every model is scored on all client
    test sets; failed cells are recorded and the run continues.

    All cells of a seed share that seed as their sampling seed.
    """
    fed = cfg.load_dataset() if fed is None else fed
    t_max, budget_error = _round_budget(cfg, fed)
    cells = benchmark_cells(cfg, fed)
    table = ResultsTable(notes=list(fed.notes))
    if budget_error:
        table.notes.append(f"strategies skipped: {budget_error}")
    for rows, notes in _run_cells(cfg, fed, cells, t_max, budget_error, jobs):
        table.rows.extend(rows)
        table.notes.extend(notes)
    return table


# ---------------------------------------------------------------------------
# Grid search
# ---------------------------------------------------------------------------

class GridSearchError(RuntimeError):
    pass


@dataclass
class GridRow:
    strategy: str
    point: dict
    value: Optional[float]
    status: str = "ok"


@dataclass
class GridResult:
    best: dict[str, dict]
    rows: list[GridRow]
    notes: list[str] = field(default_factory=list)

    def resolved(self, cfg: BenchConfig) -> BenchConfig:
        """``cfg`` with every gridded strategy fixed to its selected point."""
        entries = tuple(
            StrategyEntry(e.name, e.kind, self.best[e.name]) if e.grid else e for e in cfg.strategies
        )
        return replace(cfg, strategies=entries)


def validation_split(fed: FederatedDataset, fraction: float, seed: int) -> FederatedDataset:
    """Carve ``fraction`` of each client's train into a held-out set that
    replaces the test split."""
    clients = []
    for k, c in enumerate(fed.clients):
        n = len(c.train)
        perm = np.random.default_rng([seed, VALIDATION_STREAM, k]).permutation(n)
        n_val = int(round(fraction * n))
        if n_val == 0 or n_val == n:
            raise ValueError(f"client {c.client_id}: cannot carve a validation set from {n} samples")
        clients.append(ClientDataset(c.client_id, c.train.take(np.sort(perm[n_val:])),
                                     c.train.take(np.sort(perm[:n_val]))))
    return fed.replace_clients(clients, fed.notes)


def _select(points_values):
    ok = [(i, p, v) for i, (p, v) in enumerate(points_values) if v is not None]
    best_v = max(v for _, _, v in ok)
    tied = [(i, p) for i, p, v in ok if v == best_v]
    tied.sort(key=lambda ip: (ip[1].get("lr", math.inf), ip[0]))
    return tied[0][1]


def grid_search(cfg: BenchConfig, fed: Optional[FederatedDataset] = None, select_on: str = "validation",
                seeds: Optional[Sequence[int]] = None, jobs: int = 1) -> GridResult:
    """Evaluate every grid point of every strategy and keep the best.

    Selection maximises the seed-averaged uniform client mean on a per-client
    validation carve-out of the training data (``select_on="validation"``) or
    on the test splits (``select_on="test"``). Ties go to the smallest client
    learning rate, then to grid order. The round budget is computed from the
    full training set.
    """
    if select_on not in ("validation", "test"):
        raise ValueError("select_on must be 'validation' or 'test'")
    fed = cfg.load_dataset() if fed is None else fed
    seeds = list(cfg.seeds[:1] if seeds is None else seeds)
    t_max, budget_error = _round_budget(cfg, fed)
    if budget_error:
        raise GridSearchError(budget_error)
    eval_fed = validation_split(fed, cfg.validation_fraction, seeds[0]) if select_on == "validation" else fed

    cells, owners = [], []
    for entry in cfg.strategies:
        for point in entry.points():
            for seed in seeds:
                cells.append(Cell("strategy", seed, entry=entry, point=point))
                owners.append((entry.name, json.dumps(point, sort_keys=True)))
    results = _run_cells(cfg, eval_fed, cells, t_max, None, jobs)

    per_point: dict[tuple, list] = {}
    notes = []
    for owner, (rows, cell_notes) in zip(owners, results):
        notes.extend(cell_notes)
        mean = next(r for r in rows if r.client_id == "mean")
        per_point.setdefault(owner, []).append(mean)

    best, grid_rows = {}, []
    for entry in cfg.strategies:
        pv = []
        for point in entry.points():
            means = per_point[(entry.name, json.dumps(point, sort_keys=True))]
            failures = [m.status for m in means if m.status != "ok" or m.value is None]
            value = None if failures else float(np.mean([m.value for m in means]))
            grid_rows.append(GridRow(entry.name, point, value, failures[0] if failures else "ok"))
            pv.append((point, value))
        if all(v is None for _, v in pv):
            listing = "; ".join(f"{json.dumps(p, sort_keys=True)}: {r.status}"
                                for (p, _), r in zip(pv, grid_rows[-len(pv):]))
            raise GridSearchError(f"every grid point of {entry.name!r} failed: {listing}")
        best[entry.name] = _select(pv)
    return GridResult(best, grid_rows, notes)


# ---------------------------------------------------------------------------
# DP sweep
# ---------------------------------------------------------------------------

DP_COLUMNS = ("sigma", "clip", "steps", "epsilon", "delta", "metric_mean", "metric_std")


def dp_sweep(cfg: BenchConfig, sigmas: Sequence[float], fed: Optional[FederatedDataset] = None,
             seeds: Optional[Sequence[int]] = None) -> list[dict]:
    """DP-FedAvg for each noise multiplier; one row per sigma aggregated over seeds."""
    if cfg.dp is None:
        raise ConfigError("config has no 'dp' section")
    fed = cfg.load_dataset() if fed is None else fed
    seeds = list(cfg.seeds if seeds is None else seeds)
    dp = cfg.dp
    rounds = dp.rounds
    if rounds is None:
        rounds = compute_round_budget(cfg.n_epochs_pooled, fed.n_train, fed.n_clients,
                                      cfg.batch_size, cfg.local_updates)
    model = cfg.build_model(fed)
    from ..strategies import StrategyConfig

    rows = []
    for sigma in sigmas:
        priv = PrivacyParams(dp.clip, sigma, dp.sampling_rate, dp.delta)
        scores, eps = [], None
        for seed in seeds:
            scfg = StrategyConfig("fedavg", dp.lr, cfg.batch_size, cfg.local_updates, rounds, seed)
            res = dp_fedavg_train(fed, model, scfg, priv)
            scores.append(evaluate_federated(model, res.trained.params, fed, cfg.metric).mean)
            eps = res.epsilon
        rows.append({
            "sigma": float(sigma), "clip": dp.clip, "steps": rounds * cfg.local_updates,
            "epsilon": eps, "delta": dp.delta,
            "metric_mean": float(np.mean(scores)), "metric_std": float(np.std(scores)),
        })
    return rows


# ---------------------------------------------------------------------------
# Serialisation
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else format(v, ".17g")
    return str(v)


def _json_value(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "null"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        text = format(v, ".17g")
        return text if any(ch in text for ch in ".eEn") else text + ".0"
    if isinstance(v, int):
        return str(v)
    return json.dumps(v)


def _records(rows, columns) -> list[dict]:
    out = []
    for r in rows:
        d = asdict(r) if not isinstance(r, dict) else r
        out.append({c: d[c] for c in columns})
    return out


def emit_records(records: list[dict], columns: Sequence[str], path, fmt: str) -> None:
    path = Path(path)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(columns)
        for rec in records:
            writer.writerow([_fmt(rec[c]) for c in columns])
        path.write_text(buf.getvalue(), encoding="utf-8")
    elif fmt == "json":
        lines = []
        for rec in records:
            body = ", ".join(f"{json.dumps(k)}: {_json_value(rec[k])}" for k in sorted(columns))
            lines.append("  {" + body + "}")
        path.write_text("[\n" + ",\n".join(lines) + ("\n" if lines else "") + "]\n", encoding="utf-8")
    else:
        raise ValueError(f"unknown format {fmt!r}; expected 'csv' or 'json'")


def emit_results(table: ResultsTable, path, fmt: str = "csv") -> None:
    """Write the table without timings, so identical runs give identical bytes."""
    emit_records(_records(table.rows, RESULT_COLUMNS), RESULT_COLUMNS, path, fmt)


def emit_timings(table: ResultsTable, path) -> None:
    cols = ("strategy", "seed", "wall_clock")
    seen, recs = set(), []
    for r in table.rows:
        key = (r.strategy, r.seed)
        if key not in seen:
            seen.add(key)
            recs.append({"strategy": r.strategy, "seed": r.seed, "wall_clock": r.wall_clock})
    emit_records(recs, cols, path, "csv")


def emit_grid(result: GridResult, path, fmt: str = "csv") -> None:
    cols = ("strategy", "point", "value", "status")
    recs = [{"strategy": r.strategy, "point": json.dumps(r.point, sort_keys=True),
             "value": r.value, "status": r.status} for r in result.rows]
    emit_records(recs, cols, path, fmt)


def write_warnings(notes: Sequence[str], path) -> None:
    Path(path).write_text("".join(f"{n}\n" for n in notes), encoding="utf-8")


def warn_all(notes):
    for n in notes:
        warnings.warn(n, stacklevel=2)
