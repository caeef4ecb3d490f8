"""Round-based federated training with full client participation.

All strategies share one sampling stream per run: clients are visited in
order inside a round and draw their minibatches from the same generator, so a
run is fully determined by its seed.
"""

from __future__ import annotations

import hashlib
import math
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import metrics as _metrics
from .data import ClientDataset, FederatedDataset, pooled_view
from .models import DivergedError, LinearModel, LocalUpdateConfig, ProxTerm, sgd_local_update

STRATEGIES = ("fedavg", "fedprox", "scaffold", "cyclic", "fedadagrad", "fedadam", "fedyogi")
FEDOPT = ("fedadagrad", "fedadam", "fedyogi")

SHUFFLE_STREAM = 1


class RoundBudgetError(ValueError):
    pass


@dataclass(frozen=True)
class StrategyConfig:
    kind: str
    lr: float
    batch_size: int = 4
    local_updates: int = 100
    rounds: Optional[int] = None
    seed: int = 0
    mu: float = 0.0
    server_lr: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    tau: float = 1e-8
    shuffle: bool = False

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.kind!r}; expected one of {STRATEGIES}")
        if not self.lr > 0:
            raise ValueError("client lr must be > 0")
        if self.batch_size < 1 or self.local_updates < 1:
            raise ValueError("batch_size and local_updates must be >= 1")
        if self.rounds is not None and self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.mu < 0:
            raise ValueError("mu must be >= 0")
        if not self.server_lr > 0:
            raise ValueError("server_lr must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if not self.tau > 0:
            raise ValueError("tau must be > 0")

    def local(self, prox: Optional[ProxTerm] = None) -> LocalUpdateConfig:
        return LocalUpdateConfig(self.lr, self.batch_size, self.local_updates, prox)

    def with_rounds(self, rounds: int) -> "StrategyConfig":
        return replace(self, rounds=rounds)


def compute_round_budget(n_epochs_pooled: int, n_train: int, n_clients: int,
                         batch_size: int, local_updates: int) -> int:
    """T_max = n_epochs * floor(n_T / K / B / E)."""
    for name, v in (("n_epochs_pooled", n_epochs_pooled), ("n_train", n_train),
                    ("n_clients", n_clients), ("batch_size", batch_size),
                    ("local_updates", local_updates)):
        if v < 1:
            raise ValueError(f"{name} must be >= 1")
    t_max = n_epochs_pooled * (n_train // (n_clients * batch_size * local_updates))
    if t_max == 0:
        raise RoundBudgetError("round budget underflow; reduce E or B")
    return t_max


# ---------------------------------------------------------------------------
# Logging / results
# ---------------------------------------------------------------------------

def params_hash(params) -> str:
    return hashlib.sha256(np.ascontiguousarray(params, dtype=float).tobytes()).hexdigest()[:16]


@dataclass
class RoundRecord:
    round: int
    params_hash: str
    client_losses: dict[str, float]
    metrics: Optional[dict[str, float]] = None


@dataclass
class TrainedResult:
    params: np.ndarray
    log: list[RoundRecord] = field(default_factory=list)
    wall_clock: float = 0.0
    per_client: Optional[list[np.ndarray]] = None

    @property
    def hashes(self) -> list[str]:
        return [r.params_hash for r in self.log]


LocalFn = Callable[[int, ClientDataset, np.ndarray], np.ndarray]


def _run_local(model, k, client, params, local_cfg, rng, losses=None, correction=None,
               round_idx=None):
    try:
        return sgd_local_update(model, params, client.train.x, client.train.y, local_cfg, rng,
                                correction=correction, losses=losses)
    except DivergedError as exc:
        raise DivergedError("local update diverged", step=exc.step, round=round_idx,
                            client=client.client_id) from exc


def _mean_loss(losses):
    return float(np.mean(losses)) if losses else float("nan")


def weighted_sum(vectors: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    acc = weights[0] * vectors[0]
    for w, v in zip(weights[1:], vectors[1:]):
        acc = acc + w * v
    return acc


def size_weights(clients: Sequence[ClientDataset]) -> list[float]:
    sizes = [len(c.train) for c in clients]
    total = sum(sizes)
    return [s / total for s in sizes]


def _collect_updates(model, clients, params, local_cfg, rng, local_fn, round_idx, client_losses):
    results = []
    for k, client in enumerate(clients):
        if local_fn is not None:
            results.append(np.asarray(local_fn(k, client, params), dtype=float))
            continue
        losses = []
        results.append(_run_local(model, k, client, params, local_cfg, rng, losses,
                                  round_idx=round_idx))
        if client_losses is not None:
            client_losses[client.client_id] = _mean_loss(losses)
    return results


# ---------------------------------------------------------------------------
# FedAvg / FedProx
# ---------------------------------------------------------------------------

def fedavg_round(model, clients, global_params, cfg: StrategyConfig, rng,
                 local_fn: Optional[LocalFn] = None, round_idx=None, client_losses=None):
    """Every client trains from the global model; the server takes the
    size-weighted average n_k / n_T of the returned parameters."""
    global_params = np.asarray(global_params, dtype=float)
    local_cfg = cfg.local()
    updates = _collect_updates(model, clients, global_params, local_cfg, rng, local_fn,
                               round_idx, client_losses)
    return weighted_sum(updates, size_weights(clients))


def fedprox_round(model, clients, global_params, cfg: StrategyConfig, rng,
                  local_fn: Optional[LocalFn] = None, round_idx=None, client_losses=None):
    """FedAvg with the proximal term mu/2 ||w - global||^2 added to each local loss."""
    global_params = np.asarray(global_params, dtype=float)
    local_cfg = cfg.local(ProxTerm(cfg.mu, global_params.copy()))
    updates = _collect_updates(model, clients, global_params, local_cfg, rng, local_fn,
                               round_idx, client_losses)
    return weighted_sum(updates, size_weights(clients))


# ---------------------------------------------------------------------------
# Scaffold
# ---------------------------------------------------------------------------

@dataclass
class ScaffoldState:
    c: np.ndarray
    c_clients: list[np.ndarray]

    @classmethod
    def zeros(cls, n_params: int, n_clients: int) -> "ScaffoldState":
        return cls(np.zeros(n_params), [np.zeros(n_params) for _ in range(n_clients)])


def scaffold_round(model, clients, global_params, state: ScaffoldState, cfg: StrategyConfig,
                   rng, round_idx=None, client_losses=None):
    """One full-participation Scaffold round with option-II control variates.

    Local steps use g(y) + (c - c_i). Afterwards
    c_i+ = c_i - c + (x - y_k) / (E * lr), the server moves by
    server_lr * mean_k(y_k - x) and c becomes the mean of the c_i+.
    """
    x = np.asarray(global_params, dtype=float)
    local_cfg = cfg.local()
    ys, new_cs = [], []
    for k, client in enumerate(clients):
        c_k = state.c_clients[k]
        losses = []
        y_k = _run_local(model, k, client, x, local_cfg, rng, losses,
                         correction=state.c - c_k, round_idx=round_idx)
        if client_losses is not None:
            client_losses[client.client_id] = _mean_loss(losses)
        # send (delta_y, delta_c); the server never needs the raw c_i
        new_cs.append(c_k - state.c + (x - y_k) / (cfg.local_updates * cfg.lr))
        ys.append(y_k)
    y_mean = np.mean(ys, axis=0)
    x_new = (1.0 - cfg.server_lr) * x + cfg.server_lr * y_mean
    c_new = np.mean(new_cs, axis=0)
    return x_new, ScaffoldState(c_new, new_cs)


# ---------------------------------------------------------------------------
# FedOpt family
# ---------------------------------------------------------------------------

@dataclass
class ServerOptState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n_params: int) -> "ServerOptState":
        return cls(np.zeros(n_params), np.zeros(n_params), 0)


def server_opt_update(x, delta, state: ServerOptState, cfg: StrategyConfig):
    """Apply one adaptive server step to the aggregated client delta."""
    delta = np.asarray(delta, dtype=float)
    m = cfg.beta1 * state.m + (1 - cfg.beta1) * delta
    d2 = delta * delta
    if cfg.kind == "fedadagrad":
        v = state.v + d2
    elif cfg.kind == "fedadam":
        v = cfg.beta2 * state.v + (1 - cfg.beta2) * d2
    elif cfg.kind == "fedyogi":
        v = state.v - (1 - cfg.beta2) * d2 * np.sign(state.v - d2)
    else:
        raise ValueError(f"{cfg.kind!r} is not a FedOpt variant")
    x_new = x + cfg.server_lr * m / (np.sqrt(v) + cfg.tau)
    return x_new, ServerOptState(m, v, state.step + 1)


def fedopt_round(model, clients, global_params, state: ServerOptState, cfg: StrategyConfig,
                 rng, local_fn: Optional[LocalFn] = None, round_idx=None, client_losses=None):
    x = np.asarray(global_params, dtype=float)
    updates = _collect_updates(model, clients, x, cfg.local(), rng, local_fn, round_idx,
                               client_losses)
    delta = weighted_sum([u - x for u in updates], size_weights(clients))
    return server_opt_update(x, delta, state, cfg)


# ---------------------------------------------------------------------------
# Drivers
# ---------------------------------------------------------------------------

def _shuffle_rng(seed):
    return np.random.default_rng([seed, SHUFFLE_STREAM])


def cyclic_run(model, clients, global_params, cfg: StrategyConfig, rng=None,
               order_log: Optional[list] = None) -> TrainedResult:
    """Sequential training: a round is one pass over all clients, each doing E
    local updates from the latest model. Visit order is the client order, or a
    fresh seeded permutation per round when ``cfg.shuffle`` is set."""
    if cfg.rounds is None or cfg.rounds < 1:
        raise ValueError("cyclic_run needs rounds >= 1")
    start = time.perf_counter()
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    shuffler = _shuffle_rng(cfg.seed)
    x = np.array(global_params, dtype=float)
    local_cfg = cfg.local()
    log = []
    for r in range(cfg.rounds):
        order = shuffler.permutation(len(clients)) if cfg.shuffle else range(len(clients))
        if order_log is not None:
            order_log.append(list(order))
        losses = {}
        for k in order:
            batch_losses = []
            x = _run_local(model, k, clients[k], x, local_cfg, rng, batch_losses, round_idx=r)
            losses[clients[k].client_id] = _mean_loss(batch_losses)
        log.append(RoundRecord(r, params_hash(x), losses))
    return TrainedResult(x, log, time.perf_counter() - start)


def train_strategy(fed: FederatedDataset, model: LinearModel, cfg: StrategyConfig,
                   eval_metric: Optional[str] = None) -> TrainedResult:
    """Run ``cfg.rounds`` rounds of the configured strategy from zero parameters.

    With ``eval_metric`` set, the uniform mean test metric is stored in each
    round record.
    """
    if cfg.rounds is None:
        raise ValueError("cfg.rounds must be set (see compute_round_budget)")
    x = model.init_params()
    if cfg.rounds == 0:
        return TrainedResult(x, [], 0.0)
    clients = list(fed.clients)
    if cfg.kind == "cyclic":
        res = cyclic_run(model, clients, x, cfg)
        if eval_metric:
            res.log[-1].metrics = {eval_metric: evaluate_federated(model, res.params, fed, eval_metric).mean}
        return res

    start = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    scaffold = ScaffoldState.zeros(model.n_params, len(clients)) if cfg.kind == "scaffold" else None
    server = ServerOptState.zeros(model.n_params) if cfg.kind in FEDOPT else None
    log = []
    for r in range(cfg.rounds):
        losses = {}
        if cfg.kind == "fedavg":
            x = fedavg_round(model, clients, x, cfg, rng, round_idx=r, client_losses=losses)
        elif cfg.kind == "fedprox":
            x = fedprox_round(model, clients, x, cfg, rng, round_idx=r, client_losses=losses)
        elif cfg.kind == "scaffold":
            x, scaffold = scaffold_round(model, clients, x, scaffold, cfg, rng, round_idx=r,
                                         client_losses=losses)
        else:
            x, server = fedopt_round(model, clients, x, server, cfg, rng, round_idx=r,
                                     client_losses=losses)
        if not np.all(np.isfinite(x)):
            raise DivergedError("non-finite global parameters", round=r)
        rec = RoundRecord(r, params_hash(x), losses)
        if eval_metric:
            rec.metrics = {eval_metric: evaluate_federated(model, x, fed, eval_metric).mean}
        log.append(rec)
    return TrainedResult(x, log, time.perf_counter() - start)


def _train_single(model, client: ClientDataset, lr, batch_size, n_epochs, seed) -> TrainedResult:
    start = time.perf_counter()
    steps = n_epochs * math.ceil(len(client.train) / batch_size)
    losses = []
    cfg = LocalUpdateConfig(lr, batch_size, steps)
    x = _run_local(model, 0, client, model.init_params(), cfg, np.random.default_rng(seed), losses)
    log = [RoundRecord(0, params_hash(x), {client.client_id: _mean_loss(losses)})]
    return TrainedResult(x, log, time.perf_counter() - start)


def train_pooled(fed: FederatedDataset, model: LinearModel, lr: float, batch_size: int,
                 n_epochs: int, seed: int = 0) -> TrainedResult:
    """Plain SGD on the concatenated training data for n_epochs * ceil(n / B) steps."""
    return _train_single(model, pooled_view(fed), lr, batch_size, n_epochs, seed)


def train_local(fed: FederatedDataset, k: int, model: LinearModel, lr: float, batch_size: int,
                n_epochs: int, seed: int = 0) -> TrainedResult:
    """Plain SGD on client k's training data only."""
    return _train_single(model, fed.clients[k], lr, batch_size, n_epochs, seed)


def personalize(model: LinearModel, global_params, fed: FederatedDataset, num_updates: int,
                lr: float, batch_size: int, seed: int = 0) -> list[np.ndarray]:
    """Fine-tune a copy of the global model on each client's train split."""
    if num_updates < 0:
        raise ValueError("num_updates must be >= 0")
    global_params = np.asarray(global_params, dtype=float)
    if num_updates == 0:
        return [global_params.copy() for _ in fed.clients]
    rng = np.random.default_rng(seed)
    cfg = LocalUpdateConfig(lr, batch_size, num_updates)
    return [_run_local(model, k, c, global_params, cfg, rng) for k, c in enumerate(fed.clients)]


@dataclass
class FederatedEval:
    values: list[Optional[float]]
    mean: float
    warnings: list[str] = field(default_factory=list)


def evaluate_federated(model: LinearModel, params, fed: FederatedDataset, metric: str,
                       split: str = "test") -> FederatedEval:
    """Metric on every client's split and their unweighted mean.

    ``params`` is either one parameter vector or a list with one vector per
    client (each evaluated on its own client only). Clients where the metric is
    undefined are reported as ``None`` and left out of the mean.
    """
    per_client = isinstance(params, (list, tuple))
    if per_client and len(params) != fed.n_clients:
        raise ValueError("need one parameter vector per client")
    values, notes = [], []
    for k, client in enumerate(fed.clients):
        data = getattr(client, split)
        p = params[k] if per_client else params
        try:
            if len(data) == 0:
                raise _metrics.UndefinedMetricError("empty split")
            pred = model.predict(p, data.x)
            values.append(_metrics.evaluate(metric, pred, data.y, fed.n_classes))
        except _metrics.UndefinedMetricError as exc:
            msg = f"client {client.client_id}: {metric} undefined ({exc}); excluded from the mean"
            warnings.warn(msg, stacklevel=2)
            notes.append(msg)
            values.append(None)
    defined = [v for v in values if v is not None]
    mean = float(np.mean(defined)) if defined else float("nan")
    return FederatedEval(values, mean, notes)
