"""Linear models, task losses and the local SGD primitive shared by every strategy.

Parameters are flat float vectors. Layouts:

* logistic: ``[w_0 .. w_{d-1}, b]``
* softmax: ``(d + 1, C)`` matrix flattened row-major, last row is the intercept
* cox: ``[w_0 .. w_{d-1}]`` (no intercept, absorbed by the baseline hazard)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit, log_softmax, logsumexp

PROB_CLAMP = 1e-12
DICE_EPS = 1e-9
KITS_DICE_EPS = 1e-5
LIDC_ALPHA_FLOOR = 1e-7
LIDC_BCE_WEIGHT = 0.1


class DivergedError(RuntimeError):
    """A local update produced a non-finite loss or parameter vector."""

    def __init__(self, message, *, step=None, round=None, client=None):
        self.step = step
        self.round = round
        self.client = client
        where = ", ".join(
            f"{k}={v}" for k, v in (("round", round), ("client", client), ("step", step)) if v is not None
        )
        super().__init__(f"{message} ({where})" if where else message)


def _clamp(p):
    return np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def _with_intercept(x):
    return np.hstack([x, np.ones((len(x), 1))])


# ---------------------------------------------------------------------------
# Standalone losses
# ---------------------------------------------------------------------------

def logistic_forward(params, features, intercept=True):
    """sigmoid(beta^T x [+ b]) clamped to [1e-12, 1 - 1e-12]."""
    params = np.asarray(params, dtype=float)
    x = np.atleast_2d(np.asarray(features, dtype=float))
    d = x.shape[1]
    if len(params) != d + int(intercept):
        raise ValueError(f"expected {d + int(intercept)} parameters for d={d}, got {len(params)}")
    z = x @ params[:d] + (params[d] if intercept else 0.0)
    out = _clamp(expit(z))
    return out if np.ndim(features) > 1 else out[0]


def bce_loss(y, y_hat):
    y = np.asarray(y, dtype=float)
    y_hat = _clamp(np.asarray(y_hat, dtype=float))
    if len(y) == 0:
        raise ValueError("empty input")
    if y.shape != y_hat.shape:
        raise ValueError("y and y_hat must have the same shape")
    return float(-np.mean(y * np.log(y_hat) + (1 - y) * np.log1p(-y_hat)))


@dataclass(frozen=True)
class FocalConfig:
    gamma: float = 2.0
    class_weights: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.class_weights is not None:
            object.__setattr__(self, "class_weights", tuple(float(w) for w in self.class_weights))
            if any(w <= 0 for w in self.class_weights):
                raise ValueError("class weights must be positive")

    def weights(self, n_classes):
        if self.class_weights is None:
            return np.ones(n_classes)
        if len(self.class_weights) != n_classes:
            raise ValueError(f"{len(self.class_weights)} class weights for {n_classes} classes")
        return np.asarray(self.class_weights)


def focal_loss(probs, true_class, cfg: FocalConfig = FocalConfig()):
    """-alpha_t (1 - p_t)^gamma log(p_t) for one class distribution."""
    probs = np.asarray(probs, dtype=float)
    if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
        raise ValueError("probs must be a probability vector")
    alpha_t = cfg.weights(len(probs))[true_class]
    p_t = _clamp(probs[true_class])
    return float(-alpha_t * (1.0 - p_t) ** cfg.gamma * np.log(p_t))


def _survival_arrays(y):
    y = np.asarray(y, dtype=float)
    return y[:, 0], y[:, 1]


def cox_nll(params, features, y):
    """Negative Cox partial log-likelihood, Breslow risk sets {j : t_j >= t_i}."""
    x = np.asarray(features, dtype=float)
    if len(x) == 0:
        raise ValueError("empty dataset")
    t, e = _survival_arrays(y)
    if np.any(t <= 0):
        raise ValueError("survival times must be > 0")
    eta = x @ np.asarray(params, dtype=float)
    events = np.flatnonzero(e == 1)
    if len(events) == 0:
        return 0.0
    at_risk = t[None, :] >= t[events, None]
    lse = logsumexp(np.where(at_risk, eta[None, :], -np.inf), axis=1)
    return float(-np.sum(eta[events] - lse))


def cox_gradient(params, features, y):
    x = np.asarray(features, dtype=float)
    if len(x) == 0:
        raise ValueError("empty dataset")
    t, e = _survival_arrays(y)
    eta = x @ np.asarray(params, dtype=float)
    events = np.flatnonzero(e == 1)
    if len(events) == 0:
        return np.zeros(x.shape[1])
    at_risk = t[None, :] >= t[events, None]
    logits = np.where(at_risk, eta[None, :], -np.inf)
    w = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
    return -(x[events] - w @ x).sum(axis=0)


def dice_loss(pred, mask, eps=DICE_EPS):
    """1 - 2TP / (2TP + FP + FN + eps) with soft counts."""
    pred = np.asarray(pred, dtype=float)
    mask = np.asarray(mask, dtype=float)
    if pred.size == 0:
        raise ValueError("empty input")
    if pred.shape != mask.shape:
        raise ValueError("pred and mask must have the same shape")
    tp = np.sum(mask * pred)
    fp = np.sum((1 - mask) * pred)
    fn = np.sum(mask * (1 - pred))
    return float(1.0 - 2 * tp / (2 * tp + fp + fn + eps))


def lidc_composite_loss(pred, mask):
    """(1 - DICE) + 0.1 * class-balanced BCE, DICE without a stabilising epsilon."""
    pred = np.asarray(pred, dtype=float)
    y = np.asarray(mask, dtype=float)
    if pred.size == 0:
        raise ValueError("empty input")
    if pred.shape != y.shape:
        raise ValueError("pred and mask must have the same shape")
    dice = 2 * np.sum(y * pred) / (np.sum(y) + np.sum(pred))
    p = _clamp(pred)
    alpha = 1.0 / max(np.mean(y), LIDC_ALPHA_FLOOR) - 1.0
    bce = -alpha * np.sum(y * np.log(p)) - np.sum((1 - y) * np.log1p(-p))
    return float((1 - dice) + LIDC_BCE_WEIGHT * bce)


def kits_composite_loss(pred, onehot, eps=KITS_DICE_EPS):
    """Cross-entropy minus joint soft DICE over the two foreground labels.

    ``pred`` and ``onehot`` are ``(n_voxels, 3)`` with column 0 the background.
    """
    pred = np.asarray(pred, dtype=float)
    y = np.asarray(onehot, dtype=float)
    if pred.shape != y.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ValueError("pred and onehot must both have shape (n, 3)")
    if np.any(pred < 0) or np.any(np.abs(pred.sum(axis=1) - 1) > 1e-9):
        raise ValueError("each voxel needs a valid class distribution")
    fg_p, fg_y = pred[:, 1:], y[:, 1:]
    ce = -np.sum(fg_y * np.log(_clamp(fg_p)))
    dice = (2 * np.sum(fg_y * fg_p) + eps) / (np.sum(fg_y) + np.sum(fg_p) + eps)
    return float(ce - dice)


def softmax_forward(params, features, n_classes):
    x = np.atleast_2d(np.asarray(features, dtype=float))
    W = np.asarray(params, dtype=float).reshape(x.shape[1] + 1, n_classes)
    return np.exp(log_softmax(_with_intercept(x) @ W, axis=1))


# ---------------------------------------------------------------------------
# Model wrapper used by training code
# ---------------------------------------------------------------------------

MODEL_KINDS = ("logistic", "softmax", "cox")
DEFAULT_LOSS = {"logistic": "bce", "softmax": "ce", "cox": "cox"}
VALID_LOSSES = {"logistic": ("bce",), "softmax": ("ce", "focal"), "cox": ("cox",)}


@dataclass(frozen=True)
class LinearModel:
    """A linear model bound to one training loss.

    ``loss`` defaults to BCE for logistic, cross-entropy for softmax and the
    negative partial log-likelihood for Cox.
    """

    kind: str
    n_features: int
    n_classes: int = 2
    loss: str = ""
    focal: FocalConfig = field(default_factory=FocalConfig)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.n_features < 1:
            raise ValueError("n_features must be >= 1")
        if self.kind == "softmax" and self.n_classes < 2:
            raise ValueError("softmax needs n_classes >= 2")
        if not self.loss:
            object.__setattr__(self, "loss", DEFAULT_LOSS[self.kind])
        if self.loss not in VALID_LOSSES[self.kind]:
            raise ValueError(f"loss {self.loss!r} is not defined for {self.kind}")

    @property
    def n_params(self) -> int:
        if self.kind == "logistic":
            return self.n_features + 1
        if self.kind == "softmax":
            return (self.n_features + 1) * self.n_classes
        return self.n_features

    @property
    def separable(self) -> bool:
        """True when the loss is a mean of per-sample terms."""
        return self.kind != "cox"

    def init_params(self) -> np.ndarray:
        return np.zeros(self.n_params)

    def _check(self, params, x):
        if x.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {x.shape[1]}")
        if len(params) != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {len(params)}")

    def predict(self, params, x):
        """Positive-class probability, class-probability matrix or Cox risk score."""
        params = np.asarray(params, dtype=float)
        x = np.asarray(x, dtype=float)
        self._check(params, x)
        if self.kind == "logistic":
            return logistic_forward(params, x)
        if self.kind == "softmax":
            return softmax_forward(params, x, self.n_classes)
        return x @ params

    def loss_value(self, params, x, y) -> float:
        return self.loss_and_grad(params, x, y)[0]

    def grad(self, params, x, y) -> np.ndarray:
        return self.loss_and_grad(params, x, y)[1]

    def loss_and_grad(self, params, x, y):
        params = np.asarray(params, dtype=float)
        x = np.asarray(x, dtype=float)
        self._check(params, x)
        if self.kind == "cox":
            return cox_nll(params, x, y), cox_gradient(params, x, y)
        losses, psg = self._per_sample(params, x, y)
        n = len(x)
        return float(losses.sum() / n), psg.sum(axis=0) / n

    def per_sample_grads(self, params, x, y) -> np.ndarray:
        """``(n, n_params)`` matrix of per-sample loss gradients."""
        if not self.separable:
            raise ValueError("the Cox partial likelihood has no per-sample gradients")
        params = np.asarray(params, dtype=float)
        x = np.asarray(x, dtype=float)
        self._check(params, x)
        return self._per_sample(params, x, y)[1]

    def _per_sample(self, params, x, y):
        xa = _with_intercept(x)
        y = np.asarray(y)
        if self.kind == "logistic":
            z = xa @ params
            p = expit(z)
            pc = _clamp(p)
            losses = -(y * np.log(pc) + (1 - y) * np.log1p(-pc))
            return losses, xa * (p - y)[:, None]
        C = self.n_classes
        logp = log_softmax(xa @ params.reshape(-1, C), axis=1)
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        onehot[np.arange(len(y)), y] = 1.0
        if self.loss == "ce":
            losses = -logp[np.arange(len(y)), y]
            dz = p - onehot
        else:
            alpha = self.focal.weights(C)[y]
            gamma = self.focal.gamma
            p_t = p[np.arange(len(y)), y]
            log_pt = np.log(_clamp(p_t))
            one_m = 1.0 - p_t
            losses = -alpha * one_m**gamma * log_pt
            # d loss / d p_t, times d p_t / d z_j = p_t (1[j=t] - p_j)
            if gamma == 0:
                coeff = -alpha * np.ones_like(p_t)
            else:
                coeff = alpha * (gamma * one_m ** (gamma - 1) * p_t * log_pt - one_m**gamma)
            dz = coeff[:, None] * (onehot - p)
        psg = xa[:, :, None] * dz[:, None, :]
        return losses, psg.reshape(len(x), -1)


# ---------------------------------------------------------------------------
# Local SGD
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProxTerm:
    mu: float
    anchor: np.ndarray


@dataclass(frozen=True)
class LocalUpdateConfig:
    lr: float
    batch_size: int
    num_updates: int
    prox: Optional[ProxTerm] = None

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.num_updates < 0:
            raise ValueError("num_updates must be >= 0")
        if self.prox is not None and self.prox.mu < 0:
            raise ValueError("mu must be >= 0")


def as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def sgd_local_update(model: LinearModel, params, x, y, cfg: LocalUpdateConfig, rng=None,
                     correction=None, losses: list | None = None):
    """Run ``cfg.num_updates`` minibatch SGD steps and return the new parameters.

    Minibatches are ``batch_size`` indices drawn uniformly with replacement
    from ``rng``, so consecutive calls sharing one generator continue the same
    sampling stream. ``correction`` is a constant vector added to every
    gradient (Scaffold's ``c - c_i``). Batch losses are appended to ``losses``
    when a list is given.
    """
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n == 0:
        raise ValueError("cannot run local updates on an empty dataset")
    rng = as_rng(rng)
    w = np.array(params, dtype=float)
    prox = cfg.prox if cfg.prox is not None and cfg.prox.mu != 0 else None
    for step in range(cfg.num_updates):
        idx = rng.integers(0, n, size=cfg.batch_size)
        loss, g = model.loss_and_grad(w, x[idx], y[idx])
        if not np.isfinite(loss):
            raise DivergedError("non-finite loss", step=step)
        if prox is not None:
            loss += 0.5 * prox.mu * float(np.sum((w - prox.anchor) ** 2))
            g = g + prox.mu * (w - prox.anchor)
        if correction is not None:
            g = g + correction
        w = w - cfg.lr * g
        if not np.all(np.isfinite(w)):
            raise DivergedError("non-finite parameters", step=step)
        if losses is not None:
            losses.append(loss)
    return w
