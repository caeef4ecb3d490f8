"""Evaluation metrics for the supported tasks."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

THRESHOLD = 0.5
DICE_EPS = 1e-9

METRICS = ("accuracy", "balanced_accuracy", "auc", "c_index", "dice")


class UndefinedMetricError(ValueError):
    """The metric has no value on this input (e.g. AUC with a single class)."""


def _nonempty(*arrays):
    n = len(arrays[0])
    if n == 0:
        raise UndefinedMetricError("empty input")
    for a in arrays[1:]:
        if len(a) != n:
            raise ValueError("inputs must have equal lengths")


def accuracy(y_prob, y_true) -> float:
    """Fraction of samples where (y_prob > 0.5) matches the 0/1 label."""
    y_prob = np.asarray(y_prob, dtype=float)
    y_true = np.asarray(y_true)
    _nonempty(y_prob, y_true)
    return float(np.mean((y_prob > THRESHOLD) == (y_true == 1)))


def balanced_accuracy(y_pred, y_true, n_classes) -> float:
    """Mean recall over the classes present in ``y_true``."""
    y_pred = np.asarray(y_pred)
    y_true = np.asarray(y_true)
    _nonempty(y_pred, y_true)
    if y_true.max() >= n_classes or y_true.min() < 0:
        raise ValueError("labels must lie in [0, n_classes)")
    recalls = [
        np.mean(y_pred[y_true == c] == c) for c in range(n_classes) if np.any(y_true == c)
    ]
    return float(np.mean(recalls))


def auc(scores, y_true) -> float:
    """ROC AUC as the Mann-Whitney statistic with average ranks for ties."""
    scores = np.asarray(scores, dtype=float)
    y_true = np.asarray(y_true)
    _nonempty(scores, y_true)
    pos = y_true == 1
    n_pos = int(pos.sum())
    n_neg = len(y_true) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative samples")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def _cindex_counts(eta, t, e, chunk=2048):
    conc = 0.0
    ties = 0.0
    total = 0.0
    events = np.flatnonzero(e == 1)
    for start in range(0, len(events), chunk):
        i = events[start:start + chunk]
        comparable = t[None, :] > t[i, None]
        lower = eta[None, :] < eta[i, None]
        equal = eta[None, :] == eta[i, None]
        total += comparable.sum()
        conc += (comparable & lower).sum()
        ties += (comparable & equal).sum()
    return conc, ties, total


def c_index(risk, times, events) -> float:
    """Harrell's concordance: pairs (i, j) with event i and t_j > t_i are
    concordant when risk_j < risk_i; ties in risk count one half."""
    eta = np.asarray(risk, dtype=float)
    t = np.asarray(times, dtype=float)
    e = np.asarray(events)
    _nonempty(eta, t, e)
    conc, ties, total = _cindex_counts(eta, t, e)
    if total == 0:
        raise UndefinedMetricError("no comparable pairs")
    return float((conc + 0.5 * ties) / total)


def dice_score(y_prob, mask, eps=DICE_EPS) -> float:
    pred = np.asarray(y_prob, dtype=float) > THRESHOLD
    y = np.asarray(mask) == 1
    if pred.size == 0:
        raise UndefinedMetricError("empty input")
    if pred.shape != y.shape:
        raise ValueError("inputs must have the same shape")
    tp = np.sum(pred & y)
    fp = np.sum(pred & ~y)
    fn = np.sum(~pred & y)
    return float(2 * tp / (2 * tp + fp + fn + eps))


def default_metric(task: str) -> str:
    return {"binary": "accuracy", "multiclass": "balanced_accuracy",
            "survival": "c_index", "mask": "dice"}[task]


def evaluate(metric: str, prediction, y, n_classes: int = 2) -> float:
    """Apply ``metric`` to a model output and a label array in dataset layout."""
    y = np.asarray(y)
    if metric == "accuracy":
        return accuracy(prediction, y)
    if metric == "auc":
        return auc(prediction, y)
    if metric == "balanced_accuracy":
        pred = np.asarray(prediction)
        if pred.ndim == 1:
            pred = np.column_stack([1 - pred, pred])
        return balanced_accuracy(pred.argmax(axis=1), y, n_classes)
    if metric == "c_index":
        return c_index(prediction, y[:, 0], y[:, 1])
    if metric == "dice":
        return dice_score(prediction, y)
    raise ValueError(f"unknown metric {metric!r}")
