import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsilo.models import (
    DivergedError,
    FocalConfig,
    LinearModel,
    LocalUpdateConfig,
    ProxTerm,
    bce_loss,
    cox_gradient,
    cox_nll,
    dice_loss,
    focal_loss,
    kits_composite_loss,
    lidc_composite_loss,
    logistic_forward,
    sgd_local_update,
    softmax_forward,
)


def central_diff(f, w, h=1e-5):
    g = np.zeros_like(w)
    for i in range(len(w)):
        e = np.zeros_like(w)
        e[i] = h
        g[i] = (f(w + e) - f(w - e)) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)


# --- forward passes and losses ---------------------------------------------

def test_logistic_forward_cases():
    assert logistic_forward(np.zeros(3), np.ones(2)) == 0.5
    assert logistic_forward(np.array([40.0]), np.array([1.0]), intercept=False) == 1 - 1e-12
    assert logistic_forward(np.array([1.0, -1.0]), np.array([2.0, 1.0]), intercept=False) == pytest.approx(
        0.7310586, abs=1e-7)
    with pytest.raises(ValueError):
        logistic_forward(np.zeros(2), np.ones(3))


def test_bce_cases():
    y = np.array([1.0, 0.0, 1.0])
    assert bce_loss(y, np.array([1.0, 0.0, 1.0])) < 1e-9
    assert bce_loss(y, np.full(3, 0.5)) == pytest.approx(math.log(2), abs=1e-12)
    assert bce_loss(np.array([1, 0]), np.array([0.8, 0.4])) == pytest.approx(0.3669845, abs=1e-7)
    with pytest.raises(ValueError):
        bce_loss(np.array([]), np.array([]))


def test_focal_cases():
    p = np.array([0.2, 0.5, 0.3])
    assert focal_loss(p, 1, FocalConfig(gamma=0)) == pytest.approx(-math.log(0.5), rel=1e-15)
    assert focal_loss(np.array([0.0, 1.0]), 1) < 1e-20
    assert focal_loss(np.array([0.5, 0.5]), 0, FocalConfig(2.0)) == pytest.approx(0.25 * math.log(2), abs=1e-7)
    assert focal_loss(p, 2, FocalConfig(0, (1.0, 1.0, 3.0))) == pytest.approx(-3 * math.log(0.3))
    with pytest.raises(ValueError):
        focal_loss(np.array([0.5, 0.6]), 0)


def test_cox_nll_cases():
    x = np.array([[1.0], [2.0]])
    assert cox_nll([0.3], x, np.array([[1, 0], [2, 0]])) == 0.0
    assert cox_nll([0.7], x[:1], np.array([[1.0, 1]])) == pytest.approx(0.0, abs=1e-15)
    assert cox_nll([0.0], x, np.array([[1.0, 1], [2.0, 1]])) == pytest.approx(math.log(2), abs=1e-12)
    with pytest.raises(ValueError):
        cox_nll([0.0], np.zeros((0, 1)), np.zeros((0, 2)))


def test_cox_gradient_zero_cases():
    x = np.random.default_rng(0).normal(size=(4, 2))
    y = np.array([[1, 0], [2, 0], [3, 0], [4, 0]], dtype=float)
    assert np.all(cox_gradient([0.4, -1.0], x, y) == 0)
    assert np.allclose(cox_gradient([0.4, -1.0], x[:1], np.array([[1.0, 1]])), 0, atol=1e-15)


def test_cox_nll_invariant_under_monotone_time_relabel():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(12, 3))
    t = rng.integers(1, 6, size=12).astype(float)
    e = rng.integers(0, 2, size=12).astype(float)
    beta = rng.normal(size=3)
    a = cox_nll(beta, x, np.column_stack([t, e]))
    b = cox_nll(beta, x, np.column_stack([np.exp(t) + 10, e]))
    assert a == b


def test_dice_cases():
    y = np.array([1.0, 1, 0, 0])
    assert dice_loss(y, y) < 1e-9
    assert dice_loss(np.array([0.0, 0, 1, 1]), y) > 1 - 1e-8
    assert dice_loss(np.array([1.0, 0, 0, 0]), y) == pytest.approx(1 / 3, abs=1e-7)


def test_lidc_cases():
    assert lidc_composite_loss(np.array([0.9, 0.1]), np.array([1, 0])) == pytest.approx(0.1210721, abs=1e-7)
    # alpha = 1/1e-7 - 1 when y == 0: only the (1 - y) branch of BCE is active
    pred = np.array([0.2, 0.4])
    expected = 1.0 + 0.1 * -(np.log(0.8) + np.log(0.6))
    assert lidc_composite_loss(pred, np.zeros(2)) == pytest.approx(expected)


def test_kits_cases():
    perfect = np.eye(3)[[0, 1, 2, 1]]
    assert kits_composite_loss(perfect, perfect) == pytest.approx(-1.0, abs=1e-6)
    uniform = np.full((1, 3), 1 / 3)
    onehot = np.array([[0.0, 1, 0]])
    dice = (2 / 3 + 1e-5) / (1 + 2 / 3 + 1e-5)
    assert kits_composite_loss(uniform, onehot) == pytest.approx(math.log(3) - dice, abs=1e-12)
    assert kits_composite_loss(uniform, onehot) == pytest.approx(0.6986, abs=1e-4)
    bg = np.tile([1.0, 0, 0], (5, 1))
    assert kits_composite_loss(bg, bg) == -1.0
    with pytest.raises(ValueError):
        kits_composite_loss(np.ones((2, 2)) / 2, np.ones((2, 2)) / 2)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_losses_nonnegative_and_finite(seed):
    rng = np.random.default_rng(seed)
    n = rng.integers(1, 10)
    y = rng.integers(0, 2, n).astype(float)
    p = rng.random(n)
    assert 0 <= bce_loss(y, p) < np.inf
    assert 0 <= dice_loss(p, y) <= 1 + 1e-12
    if y.sum() + p.sum() > 0:
        assert np.isfinite(lidc_composite_loss(p, y)) and lidc_composite_loss(p, y) >= 0
    probs = rng.dirichlet(np.ones(3), size=n)
    onehot = np.eye(3)[rng.integers(0, 3, n)]
    assert kits_composite_loss(probs, onehot) >= -1 - 1e-12
    assert focal_loss(probs[0], int(onehot[0].argmax())) >= 0


# --- softmax ----------------------------------------------------------------

def test_softmax_zero_params_uniform():
    p = softmax_forward(np.zeros(4 * 3), np.ones((2, 3)), 3)
    assert np.allclose(p, 1 / 3)


def test_softmax_two_class_equals_logistic():
    rng = np.random.default_rng(1)
    W = rng.normal(size=(4, 2))
    x = rng.normal(size=(5, 3))
    p = softmax_forward(W.ravel(), x, 2)[:, 1]
    q = logistic_forward(W[:, 1] - W[:, 0], x)
    assert np.allclose(p, q, atol=1e-14)


# --- gradients ----------------------------------------------------------------

@pytest.mark.parametrize("kind,loss", [("logistic", "bce"), ("softmax", "ce"), ("softmax", "focal")])
def test_gradient_finite_differences(kind, loss):
    rng = np.random.default_rng(7)
    for _ in range(20):
        d, C, n = 3, 4, 8
        model = LinearModel(kind, d, C, loss, FocalConfig(2.0, tuple(rng.uniform(0.5, 2, C))))
        w = rng.normal(size=model.n_params)
        x = rng.normal(size=(n, d))
        y = rng.integers(0, 2 if kind == "logistic" else C, n)
        g = model.grad(w, x, y)
        num = central_diff(lambda v: model.loss_value(v, x, y), w)
        assert rel_err(g, num) < 1e-5


def test_cox_gradient_finite_differences():
    rng = np.random.default_rng(8)
    for _ in range(20):
        x = rng.normal(size=(6, 3))
        y = np.column_stack([rng.integers(1, 5, 6).astype(float), rng.integers(0, 2, 6)])
        y[0, 1] = 1
        beta = rng.normal(size=3)
        num = central_diff(lambda v: cox_nll(v, x, y), beta)
        assert rel_err(cox_gradient(beta, x, y), num) < 1e-5


def test_per_sample_grads_sum_to_batch_grad():
    rng = np.random.default_rng(2)
    model = LinearModel("softmax", 3, 3)
    w = rng.normal(size=model.n_params)
    x = rng.normal(size=(5, 3))
    y = rng.integers(0, 3, 5)
    assert np.allclose(model.per_sample_grads(w, x, y).mean(axis=0), model.grad(w, x, y))
    with pytest.raises(ValueError):
        LinearModel("cox", 3).per_sample_grads(np.zeros(3), x, np.ones((5, 2)))


def test_focal_gamma_zero_equals_ce():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(10, 2))
    y = rng.integers(0, 3, 10)
    w = rng.normal(size=9)
    ce = LinearModel("softmax", 2, 3, "ce")
    fl = LinearModel("softmax", 2, 3, "focal", FocalConfig(0.0))
    assert ce.loss_value(w, x, y) == pytest.approx(fl.loss_value(w, x, y), rel=1e-14)


def test_model_validation():
    with pytest.raises(ValueError):
        LinearModel("tree", 2)
    with pytest.raises(ValueError):
        LinearModel("logistic", 2, loss="focal")
    with pytest.raises(ValueError):
        LinearModel("logistic", 2).predict(np.zeros(3), np.zeros((1, 3)))


# --- local SGD --------------------------------------------------------------

def _task(n=40, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 2))
    y = (x[:, 0] > 0).astype(np.int64)
    return x, y


def test_sgd_lr_zero_is_identity():
    x, y = _task()
    model = LinearModel("logistic", 2)
    w0 = np.array([0.1, -0.2, 0.3])
    w = sgd_local_update(model, w0, x, y, LocalUpdateConfig(0.0, 4, 10), rng=1)
    assert np.array_equal(w, w0)


def test_sgd_prox_mu_zero_bit_identical():
    x, y = _task()
    model = LinearModel("logistic", 2)
    w0 = np.zeros(3)
    a = sgd_local_update(model, w0, x, y, LocalUpdateConfig(0.1, 4, 50), rng=3)
    b = sgd_local_update(model, w0, x, y, LocalUpdateConfig(0.1, 4, 50, ProxTerm(0.0, np.ones(3))), rng=3)
    assert np.array_equal(a, b)


def test_sgd_descends_on_separable_data():
    x, y = _task()
    model = LinearModel("logistic", 2)
    w0 = np.zeros(3)
    w = sgd_local_update(model, w0, x, y, LocalUpdateConfig(0.1, 4, 100), rng=0)
    assert model.loss_value(w, x, y) < model.loss_value(w0, x, y)


def test_sgd_step_count_and_losses():
    x, y = _task()
    losses = []
    sgd_local_update(LinearModel("logistic", 2), np.zeros(3), x, y, LocalUpdateConfig(0.1, 4, 17), 0,
                     losses=losses)
    assert len(losses) == 17


def test_sgd_prox_dominance():
    x, y = _task()
    w0 = np.array([0.5, 0.5, 0.5])
    # explicit prox steps are stable for lr * mu <= 1; at lr * mu = 1 every step
    # lands back on the anchor up to lr * |grad|
    cfg = LocalUpdateConfig(1e-6, 4, 100, ProxTerm(1e6, w0))
    w = sgd_local_update(LinearModel("logistic", 2), w0, x, y, cfg, 0)
    assert np.linalg.norm(w - w0) < 1e-3


def test_sgd_prox_unstable_step_is_reported():
    x, y = _task()
    w0 = np.array([0.5, 0.5, 0.5])
    cfg = LocalUpdateConfig(1e-3, 4, 1000, ProxTerm(1e6, w0))
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(DivergedError):
        sgd_local_update(LinearModel("logistic", 2), w0, x, y, cfg, 0)


def test_sgd_divergence_raises():
    x, y = _task()
    x = x * 1e200
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(DivergedError) as exc:
        sgd_local_update(LinearModel("logistic", 2), np.zeros(3), x, y, LocalUpdateConfig(1e200, 4, 10), 0)
    assert exc.value.step is not None


def test_sgd_empty_data():
    with pytest.raises(ValueError):
        sgd_local_update(LinearModel("logistic", 2), np.zeros(3), np.zeros((0, 2)), np.zeros(0),
                         LocalUpdateConfig(0.1, 1, 1))
