"""DP-FedAvg: DP-SGD local updates and a Renyi-DP accountant.

The accountant tracks the Poisson-subsampled Gaussian mechanism at integer
orders 2..64 and converts to (epsilon, delta) with
eps = min_a [rdp(a) * steps + log(1/delta) / (a - 1)].
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import gammaln, logsumexp

from .data import FederatedDataset
from .models import DivergedError, LinearModel, LocalUpdateConfig, as_rng
from .strategies import RoundRecord, StrategyConfig, TrainedResult, params_hash, size_weights, weighted_sum

ORDERS = tuple(range(2, 65))


@dataclass(frozen=True)
class PrivacyParams:
    clip: float
    noise_multiplier: float
    sampling_rate: float
    delta: float = 1e-5

    def __post_init__(self):
        if not self.clip > 0:
            raise ValueError("clip norm must be > 0")
        if self.noise_multiplier < 0:
            raise ValueError("noise multiplier must be >= 0")
        if not 0 < self.sampling_rate <= 1:
            raise ValueError("sampling rate must lie in (0, 1]")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.noise_multiplier > 0 and math.isinf(self.clip):
            raise ValueError("an infinite clip norm needs noise_multiplier = 0")


def clip_to_norm(v, clip: float) -> np.ndarray:
    """Scale ``v`` by min(1, clip / ||v||_2)."""
    if not clip > 0:
        raise ValueError("clip must be > 0")
    v = np.asarray(v, dtype=float)
    norm = np.linalg.norm(v)
    if norm <= clip:
        return v.copy()
    return v * (clip / norm)


def _clip_rows(g, clip):
    norms = np.linalg.norm(g, axis=1)
    over = norms > clip
    factor = np.ones_like(norms)
    factor[over] = clip / norms[over]
    return g * factor[:, None]


def dp_local_update(model: LinearModel, params, x, y, cfg: LocalUpdateConfig,
                    priv: PrivacyParams, rng=None, clip_log: Optional[list] = None):
    """DP-SGD: Poisson-subsample each sample with probability q, clip each
    per-sample gradient to the clip norm, sum, divide by q * n and add
    N(0, (sigma * C / (q * n))^2) noise per coordinate.

    Returns ``(params, steps_taken)``. ``clip_log`` receives the largest
    clipped per-sample norm of every step.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y)
    n = len(x)
    if n == 0:
        raise ValueError("cannot run local updates on an empty dataset")
    rng = as_rng(rng)
    w = np.array(params, dtype=float)
    denom = priv.sampling_rate * n
    noise_std = priv.noise_multiplier * priv.clip / denom if priv.noise_multiplier > 0 else 0.0
    for step in range(cfg.num_updates):
        take = np.flatnonzero(rng.random(n) < priv.sampling_rate)
        if take.size:
            clipped = _clip_rows(model.per_sample_grads(w, x[take], y[take]), priv.clip)
            g = clipped.sum(axis=0) / denom
            if clip_log is not None:
                clip_log.append(float(np.linalg.norm(clipped, axis=1).max()))
        else:
            g = np.zeros_like(w)
        if noise_std > 0:
            g = g + rng.normal(0.0, noise_std, size=w.shape)
        w = w - cfg.lr * g
        if not np.all(np.isfinite(w)):
            raise DivergedError("non-finite parameters", step=step)
    return w, cfg.num_updates


# ---------------------------------------------------------------------------
# Accounting
# ---------------------------------------------------------------------------

def rdp_subsampled_gaussian(q: float, sigma: float, order: int) -> float:
    """Per-step RDP of the Poisson-subsampled Gaussian mechanism at an integer order.

    Uses the binomial expansion
    A = sum_k C(a, k) (1 - q)^(a - k) q^k exp((k^2 - k) / (2 sigma^2)),
    rdp = log(A) / (a - 1); for q = 1 this is exactly a / (2 sigma^2).
    """
    if int(order) != order or order < 2:
        raise ValueError("order must be an integer >= 2")
    if not 0 < q <= 1:
        raise ValueError("q must lie in (0, 1]")
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    a = int(order)
    if q == 1:
        return a / (2 * sigma**2)
    k = np.arange(a + 1)
    log_binom = gammaln(a + 1) - gammaln(k + 1) - gammaln(a - k + 1)
    terms = log_binom + (a - k) * math.log1p(-q) + k * math.log(q) + (k * k - k) / (2 * sigma**2)
    return float(logsumexp(terms) / (a - 1))


@dataclass
class PrivacyLedger:
    sampling_rate: float
    noise_multiplier: float
    orders: tuple[int, ...] = ORDERS
    steps: int = 0
    rdp_per_step: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.noise_multiplier > 0:
            self.rdp_per_step = np.array([
                rdp_subsampled_gaussian(self.sampling_rate, self.noise_multiplier, a)
                for a in self.orders
            ])
        else:
            self.rdp_per_step = np.full(len(self.orders), np.inf)

    def record(self, steps: int) -> None:
        if steps < 0:
            raise ValueError("steps must be >= 0")
        self.steps += steps

    @property
    def rdp(self) -> np.ndarray:
        """Accumulated RDP per order."""
        if self.steps == 0:
            return np.zeros(len(self.orders))
        return self.rdp_per_step * self.steps

    def epsilon(self, delta: float) -> float:
        return compose_and_convert(self, self.steps, delta)


def compose_and_convert(ledger: PrivacyLedger, steps: int, delta: float) -> float:
    """Compose ``steps`` identical mechanisms and convert RDP to epsilon at ``delta``."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    orders = np.asarray(ledger.orders, dtype=float)
    rdp = ledger.rdp_per_step * steps if steps else np.zeros(len(orders))
    return float(np.min(rdp + math.log(1 / delta) / (orders - 1)))


# ---------------------------------------------------------------------------
# DP-FedAvg
# ---------------------------------------------------------------------------

@dataclass
class DPResult:
    trained: TrainedResult
    epsilon: float
    ledgers: list[PrivacyLedger]


def dp_fedavg_train(fed: FederatedDataset, model: LinearModel, cfg: StrategyConfig,
                    priv: PrivacyParams) -> DPResult:
    """FedAvg whose local updates are DP-SGD; each client is its own privacy
    unit and the reported epsilon is the maximum over clients."""
    if cfg.rounds is None:
        raise ValueError("cfg.rounds must be set")
    start = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    x = model.init_params()
    local_cfg = cfg.local()
    ledgers = [PrivacyLedger(priv.sampling_rate, priv.noise_multiplier) for _ in fed.clients]
    weights = size_weights(fed.clients)
    log = []
    for r in range(cfg.rounds):
        updates = []
        for k, client in enumerate(fed.clients):
            try:
                w, steps = dp_local_update(model, x, client.train.x, client.train.y, local_cfg,
                                           priv, rng)
            except DivergedError as exc:
                raise DivergedError("local update diverged", step=exc.step, round=r,
                                    client=client.client_id) from exc
            ledgers[k].record(steps)
            updates.append(w)
        x = weighted_sum(updates, weights)
        log.append(RoundRecord(r, params_hash(x), {}))
    eps = max(ledger.epsilon(priv.delta) for ledger in ledgers)
    return DPResult(TrainedResult(x, log, time.perf_counter() - start), eps, ledgers)
