"""Benchmark configuration files (JSON).

Example::

    {
      "name": "heart_like",
      "dataset": {"synthetic": {...}, "seed": 0},
      "resplit": {"k_prime": 6, "alpha": 1.0, "seed": 0},      # optional
      "shuffle": {"seed": 0},                                   # optional IID variant
      "model": "logistic", "metric": "accuracy",
      "lr": 0.05, "batch_size": 4, "local_updates": 100, "n_epochs_pooled": 20,
      "seeds": [0, 1, 2, 3, 4],
      "strategies": [
        {"kind": "fedavg", "lr": 0.05},
        {"kind": "fedprox", "grid": {"lr": [0.01, 0.001], "mu": [1.0, 0.1, 0.01]}}
      ],
      "dp": {"clip": 1.0, "sampling_rate": 0.05, "delta": 1e-3, "lr": 0.05}   # dp-sweep only
    }

``lr`` / ``batch_size`` / ``n_epochs_pooled`` are the ML hyperparameters
shared by the pooled and local baselines; each strategy carries its own
client learning rate and strategy-specific knobs.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional

from ..data import (DirichletSplitConfig, FederatedDataset, SynthSpec, dirichlet_resplit, generate, load_csv,
                    shuffle_clients)
from ..metrics import METRICS, default_metric
from ..models import MODEL_KINDS, FocalConfig, LinearModel
from ..strategies import STRATEGIES, StrategyConfig

DEFAULT_SEEDS = (0, 1, 2, 3, 4)
DEFAULT_LOCAL_UPDATES = 100
STRATEGY_KEYS = {"kind", "name", "lr", "mu", "server_lr", "beta1", "beta2", "tau", "shuffle", "grid"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StrategyEntry:
    """A named strategy with fixed settings plus an optional grid to search."""

    name: str
    kind: str
    params: dict
    grid: dict = field(default_factory=dict)

    def points(self) -> list[dict]:
        if not self.grid:
            return [dict(self.params)]
        keys = list(self.grid)
        return [dict(self.params, **dict(zip(keys, combo)))
                for combo in itertools.product(*(self.grid[k] for k in keys))]

    def config(self, point: dict, batch_size, local_updates, seed, rounds) -> StrategyConfig:
        return StrategyConfig(kind=self.kind, batch_size=batch_size, local_updates=local_updates,
                              seed=seed, rounds=rounds, **point)


@dataclass(frozen=True)
class DPSettings:
    clip: float
    sampling_rate: float
    delta: float
    lr: float
    rounds: Optional[int] = None


@dataclass(frozen=True)
class BenchConfig:
    name: str
    dataset: dict
    model: str
    metric: str
    lr: float
    batch_size: int
    n_epochs_pooled: int
    strategies: tuple[StrategyEntry, ...]
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    local_updates: int = DEFAULT_LOCAL_UPDATES
    loss: str = ""
    focal: Optional[dict] = None
    resplit: Optional[dict] = None
    shuffle: Optional[dict] = None
    dp: Optional[DPSettings] = None
    validation_fraction: float = 0.2
    base_dir: Path = Path(".")

    def with_seeds(self, n: int) -> "BenchConfig":
        return replace(self, seeds=tuple(range(n)))

    def build_model(self, fed: FederatedDataset) -> LinearModel:
        focal = FocalConfig(**self.focal) if self.focal else FocalConfig()
        return LinearModel(self.model, fed.d, fed.n_classes, self.loss, focal)

    def load_dataset(self) -> FederatedDataset:
        src = self.dataset
        if "csv" in src:
            path = Path(src["csv"])
            if not path.is_absolute():
                path = self.base_dir / path
            fed = load_csv(path, task=src.get("task"), n_classes=src.get("n_classes"))
        else:
            fed = generate(SynthSpec.from_dict(src["synthetic"]), src.get("seed", 0))
        if self.resplit:
            fed = dirichlet_resplit(fed, DirichletSplitConfig(**self.resplit))
        if self.shuffle is not None:
            fed = shuffle_clients(fed, self.shuffle.get("seed", 0))
        return fed


def _require(raw, key, types, where="config"):
    if key not in raw:
        raise ConfigError(f"{where}: missing required key {key!r}")
    if not isinstance(raw[key], types):
        raise ConfigError(f"{where}: {key!r} has the wrong type")
    return raw[key]


def _parse_strategy(raw, i) -> StrategyEntry:
    where = f"strategies[{i}]"
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = set(raw) - STRATEGY_KEYS
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kind = _require(raw, "kind", str, where)
    if kind not in STRATEGIES:
        raise ConfigError(f"{where}: unknown strategy {kind!r}")
    grid = raw.get("grid") or {}
    if not isinstance(grid, dict) or any(not isinstance(v, list) or not v for v in grid.values()):
        raise ConfigError(f"{where}: grid values must be non-empty lists")
    if set(grid) - (STRATEGY_KEYS - {"kind", "name", "grid"}):
        raise ConfigError(f"{where}: unknown grid keys")
    params = {k: v for k, v in raw.items() if k not in ("kind", "name", "grid")}
    if "lr" not in params and "lr" not in grid:
        raise ConfigError(f"{where}: a client learning rate 'lr' is required")
    entry = StrategyEntry(raw.get("name", kind), kind, params, grid)
    try:
        for p in entry.points():
            entry.config(p, 1, 1, 0, None)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None
    return entry


def parse_config(raw: dict, base_dir: Path = Path(".")) -> BenchConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    dataset = _require(raw, "dataset", dict)
    if ("csv" in dataset) == ("synthetic" in dataset):
        raise ConfigError("dataset needs exactly one of 'csv' or 'synthetic'")
    if "synthetic" in dataset:
        try:
            SynthSpec.from_dict(dataset["synthetic"])
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"dataset.synthetic: {exc}") from None
    model = _require(raw, "model", str)
    if model not in MODEL_KINDS:
        raise ConfigError(f"unknown model {model!r}")
    metric = raw.get("metric") or default_metric(
        {"logistic": "binary", "softmax": "multiclass", "cox": "survival"}[model])
    if metric not in METRICS:
        raise ConfigError(f"unknown metric {metric!r}")
    strategies = _require(raw, "strategies", list)
    entries = tuple(_parse_strategy(s, i) for i, s in enumerate(strategies))
    names = [e.name for e in entries]
    if len(set(names)) != len(names):
        raise ConfigError(f"strategy names must be unique: {names}")
    seeds = raw.get("seeds", list(DEFAULT_SEEDS))
    if isinstance(seeds, int):
        seeds = list(range(seeds))
    if not seeds:
        raise ConfigError("seeds must be non-empty")
    dp = raw.get("dp")
    try:
        cfg = BenchConfig(
            name=raw.get("name", "benchmark"),
            dataset=dataset,
            model=model,
            metric=metric,
            lr=float(_require(raw, "lr", (int, float))),
            batch_size=int(_require(raw, "batch_size", int)),
            n_epochs_pooled=int(_require(raw, "n_epochs_pooled", int)),
            strategies=entries,
            seeds=tuple(int(s) for s in seeds),
            local_updates=int(raw.get("local_updates", DEFAULT_LOCAL_UPDATES)),
            loss=raw.get("loss", ""),
            focal=raw.get("focal"),
            resplit=raw.get("resplit"),
            shuffle=raw.get("shuffle"),
            dp=DPSettings(**dp) if dp else None,
            validation_fraction=float(raw.get("validation_fraction", 0.2)),
            base_dir=base_dir,
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    if cfg.batch_size < 1 or cfg.n_epochs_pooled < 1 or cfg.local_updates < 1 or cfg.lr <= 0:
        raise ConfigError("lr, batch_size, n_epochs_pooled and local_updates must be positive")
    if not 0 < cfg.validation_fraction < 1:
        raise ConfigError("validation_fraction must lie in (0, 1)")
    return cfg


def shipped_config_path(name: str) -> Path:
    return Path(str(resources.files("fedsilo.bench") / "configs" / f"{name}.json"))


def load_config(path_or_name) -> BenchConfig:
    """Load a config file, or a shipped config by bare name (e.g. ``heart_like``)."""
    path = Path(path_or_name)
    if not path.exists():
        shipped = shipped_config_path(str(path_or_name))
        if not shipped.exists():
            raise ConfigError(f"config {path_or_name!r} not found")
        path = shipped
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(raw, path.parent)


def reference_hyperparameters() -> dict:
    """Per-dataset, per-strategy hyperparameters chosen by the original grid search."""
    return json.loads(shipped_config_path("hyperparameters").read_text(encoding="utf-8"))
