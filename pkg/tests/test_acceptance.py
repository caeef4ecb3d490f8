"""Acceptance criteria: one PASS/FAIL line per criterion.

Run with pytest (lines are repeated in the terminal summary) or directly:
``python3 tests/test_acceptance.py``.
"""

import itertools
import json
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np
from scipy import stats

sys.path.insert(0, str(Path(__file__).parent))
from conftest import ACCEPTANCE_LINES, make_binary_fed  # noqa: E402

from fedsilo.bench.cli import main as bench_main
from fedsilo.bench.config import load_config
from fedsilo.bench.runner import dp_sweep, run_benchmark
from fedsilo.data import ClientSpec, SynthSpec, gen_synthetic_survival, generate
from fedsilo.heterogeneity import (
    chi2_sf,
    client_entropy,
    exact_assignment_w2,
    heterogeneity_report,
    iid_baseline_matrix,
    logrank_test,
    pairwise_distance_matrix,
    rescale_against_iid,
)
from fedsilo.metrics import auc, c_index
from fedsilo.models import FocalConfig, LinearModel, LocalUpdateConfig, cox_gradient, cox_nll, sgd_local_update
from fedsilo.privacy import ORDERS, PrivacyLedger, compose_and_convert, rdp_subsampled_gaussian
from fedsilo.strategies import (
    RoundBudgetError,
    ScaffoldState,
    ServerOptState,
    StrategyConfig,
    compute_round_budget,
    evaluate_federated,
    fedopt_round,
    personalize,
    scaffold_round,
    train_strategy,
)


def record(n, title, checks):
    """Print and register the verdict for criterion ``n``; fail the test on any false check."""
    failed = [name for name, ok in checks if not ok]
    verdict = "PASS" if not failed else "FAIL"
    line = f"{verdict} criterion {n:2d}: {title}" + (f" [failed: {', '.join(failed)}]" if failed else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert not failed, line


def guarded(n, title):
    """Decorator: an exception inside a criterion still yields a FAIL line."""
    def wrap(fn):
        def test():
            try:
                checks = fn()
            except Exception as exc:  # report, then re-raise for pytest
                record(n, title, [(f"{type(exc).__name__}: {exc}", False)])
                raise
            record(n, title, checks)
        test.__name__ = fn.__name__
        return test
    return wrap


# --- oracles --------------------------------------------------------------------

def brute_auc(s, y):
    pos, neg = s[y == 1], s[y == 0]
    return sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg) / (len(pos) * len(neg))


def brute_cindex(eta, t, e):
    num = den = 0.0
    for i, j in itertools.permutations(range(len(t)), 2):
        if e[i] == 1 and t[j] > t[i]:
            den += 1
            num += 1.0 if eta[j] < eta[i] else 0.5 if eta[j] == eta[i] else 0.0
    return num / den


def brute_w2(a, b):
    m = len(a)
    return min(sum(np.sum((a[i] - b[p[i]]) ** 2) for i in range(m)) for p in itertools.permutations(range(m))) / m


def central_diff(f, w, h=1e-5):
    g = np.zeros_like(w)
    for i in range(len(w)):
        e = np.zeros_like(w)
        e[i] = h
        g[i] = (f(w + e) - f(w - e)) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)


def only_fedavg(cfg):
    return replace(cfg, strategies=tuple(e for e in cfg.strategies if e.kind == "fedavg"))


# --- criteria -------------------------------------------------------------------

@guarded(1, "client entropy reproduces the six published values within 0.01")
def test_criterion_01_entropy():
    published = [((243, 156), 0.97), ((311, 181, 74), 1.38), ((311, 196, 206, 162, 162, 51), 2.44),
                 ((12, 14, 12, 12, 16, 30), 2.49), ((12413, 3954, 3363, 2259, 819, 439), 1.93),
                 ((303, 261, 46, 130), 1.75)]
    return [(f"{sizes} -> {client_entropy(sizes):.4f} vs {h}", abs(client_entropy(sizes) - h) <= 0.01)
            for sizes, h in published]


@guarded(2, "synthetic survival censoring 0.86 +- 0.03 at n = 1088")
def test_criterion_02_censoring():
    sizes = (311, 196, 206, 162, 162, 51)
    spec = SynthSpec("survival", 5, tuple(ClientSpec(n, shift=0.2 * k) for k, n in enumerate(sizes)),
                     censoring_rate=0.86)
    fed = gen_synthetic_survival(spec, 0)
    y = np.concatenate([np.concatenate([c.train.y, c.test.y]) for c in fed.clients])
    rate = 1.0 - y[:, 1].mean()
    return [(f"n={len(y)}", len(y) == 1088), (f"rate={rate:.4f}", abs(rate - 0.86) <= 0.03)]


@guarded(3, "strategy identities (FedProx mu=0, single-client collapse, Scaffold c, FedOpt fixed point)")
def test_criterion_03_identities():
    model = LinearModel("logistic", 3)
    fed = make_binary_fed([30, 50, 40], shift=[0.0, 1.0, -1.0])
    checks = []
    avg = train_strategy(fed, model, StrategyConfig("fedavg", 0.1, 4, 10, rounds=6, seed=3))
    prox = train_strategy(fed, model, StrategyConfig("fedprox", 0.1, 4, 10, rounds=6, seed=3, mu=0.0))
    checks.append(("fedprox mu=0 == fedavg", avg.hashes == prox.hashes))

    single = make_binary_fed([40])
    c = single.clients[0]
    plain = sgd_local_update(model, np.zeros(4), c.train.x, c.train.y, LocalUpdateConfig(0.2, 4, 28), 11)
    for kind, extra in (("fedavg", {}), ("fedprox", {"mu": 0.0}), ("cyclic", {}), ("scaffold", {"server_lr": 1.0})):
        res = train_strategy(single, model, StrategyConfig(kind, 0.2, 4, 7, rounds=4, seed=11, **extra))
        checks.append((f"{kind} single-client collapse", np.array_equal(res.params, plain)))

    state, x = ScaffoldState.zeros(4, 3), np.zeros(4)
    rng = np.random.default_rng(0)
    ok = True
    for _ in range(6):
        x, state = scaffold_round(model, fed.clients, x, state, StrategyConfig("scaffold", 0.1, 4, 5, server_lr=0.7), rng)
        ok &= np.array_equal(state.c, np.mean(state.c_clients, axis=0))
    checks.append(("scaffold c == mean(c_i)", ok))

    for kind in ("fedadagrad", "fedadam", "fedyogi"):
        x0, s = np.array([1.0, -2.0, 0.5, 0.0]), ServerOptState.zeros(4)
        x = x0
        for _ in range(4):
            x, s = fedopt_round(model, fed.clients, x, s, StrategyConfig(kind, 0.1, server_lr=0.3), None,
                                local_fn=lambda k, cl, p: p)
        checks.append((f"{kind} zero-delta fixed point", np.array_equal(x, x0)))
    return checks


@guarded(4, "round budget formula and underflow error")
def test_criterion_04_round_budget():
    checks = [("1 epoch exact", compute_round_budget(1, 4 * 8 * 100, 4, 8, 100) == 1),
              ("2 epochs", compute_round_budget(2, 8000, 4, 4, 100) == 10),
              ("floor", compute_round_budget(3, 1000, 2, 4, 10) == 3 * 12)]
    try:
        compute_round_budget(45, 270, 2, 16, 100)
        checks.append(("underflow raises", False))
    except RoundBudgetError as exc:
        checks.append(("underflow message", "reduce E or B" in str(exc)))
    return checks


@guarded(5, "AUC / C-index / exact W2 equal exhaustive enumeration")
def test_criterion_05_oracles():
    rng = np.random.default_rng(2024)
    auc_ok = cidx_ok = w2_ok = True
    for _ in range(500):
        n = int(rng.integers(2, 51))
        y = rng.integers(0, 2, n)
        y[:2] = (0, 1)
        s = rng.integers(0, 10, n) / 10.0
        auc_ok &= abs(auc(s, y) - brute_auc(s, y)) <= 1e-12
        t = rng.integers(1, 12, n).astype(float)
        e = rng.integers(0, 2, n)
        t[:2], e[0] = (1.0, 2.0), 1
        eta = rng.integers(0, 6, n).astype(float)
        cidx_ok &= abs(c_index(eta, t, e) - brute_cindex(eta, t, e)) <= 1e-12
    for _ in range(200):
        m = int(rng.integers(1, 7))
        a, b = rng.normal(size=(m, 3)), rng.normal(size=(m, 3))
        w2_ok &= abs(exact_assignment_w2(a, b) - brute_w2(a, b)) <= 1e-12
    return [("auc x500", auc_ok), ("c-index x500", cidx_ok), ("exact w2 x200", w2_ok)]


@guarded(6, "analytic gradients match central differences (rel err < 1e-5, 100 instances each)")
def test_criterion_06_gradients():
    rng = np.random.default_rng(6)
    worst = {}
    for kind, loss in (("logistic", "bce"), ("softmax", "ce"), ("softmax", "focal")):
        errs = []
        for _ in range(100):
            d, C, n = int(rng.integers(1, 6)), int(rng.integers(2, 5)), int(rng.integers(1, 12))
            model = LinearModel(kind, d, C, loss, FocalConfig(2.0, tuple(rng.uniform(0.5, 2, C))))
            w = rng.normal(size=model.n_params)
            x = rng.normal(size=(n, d))
            y = rng.integers(0, 2 if kind == "logistic" else C, n)
            errs.append(rel_err(model.grad(w, x, y), central_diff(lambda v: model.loss_value(v, x, y), w)))
        worst[f"{kind}/{loss}"] = max(errs)
    errs = []
    for _ in range(100):
        n, d = int(rng.integers(2, 10)), int(rng.integers(1, 5))
        x = rng.normal(size=(n, d))
        y = np.column_stack([rng.integers(1, 6, n).astype(float), rng.integers(0, 2, n)])
        y[0, 1] = 1
        beta = rng.normal(size=d)
        errs.append(rel_err(cox_gradient(beta, x, y), central_diff(lambda v: cox_nll(v, x, y), beta)))
    worst["cox"] = max(errs)
    return [(f"{k} max rel err {v:.2e}", v < 1e-5) for k, v in worst.items()]


@guarded(7, "heart-like: pooled - FedAvg >= 0.02, FedAvg - local >= 0.05; IID FedAvg within 0.02 of pooled")
def test_criterion_07_benchmark_shape():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        het = run_benchmark(only_fedavg(load_config("heart_like")), jobs=4)
        iid = run_benchmark(only_fedavg(load_config("heart_like_iid")), jobs=4)
    pooled, fedavg, local = het.seed_mean("pooled"), het.seed_mean("fedavg"), het.local_mean()
    i_pooled, i_fedavg = iid.seed_mean("pooled"), iid.seed_mean("fedavg")
    return [
        ("5 seeds", len(het.mean_rows("fedavg")) == 5 and len(iid.mean_rows("fedavg")) == 5),
        (f"pooled {pooled:.4f} - fedavg {fedavg:.4f} >= 0.02", pooled - fedavg >= 0.02),
        (f"fedavg {fedavg:.4f} - local {local:.4f} >= 0.05", fedavg - local >= 0.05),
        (f"iid fedavg {i_fedavg:.4f} >= pooled {i_pooled:.4f} - 0.02", i_fedavg >= i_pooled - 0.02),
        ("no failed cells", not het.failed and not iid.failed),
    ]


@guarded(8, "heterogeneity pipeline: standardised baseline, duplicated client, monotone shift")
def test_criterion_08_heterogeneity():
    checks = []
    fed = generate(SynthSpec("binary", 20, tuple(ClientSpec(120, shift=s) for s in (0.0, 1.0, 3.0, 0.0))), 0)
    nat = pairwise_distance_matrix(fed, "features", seed=0, reps=20)
    iid = iid_baseline_matrix(fed, "features", seed=0, reps=20)
    _, r_iid = rescale_against_iid(nat, iid)
    off = r_iid.off_diagonal
    checks.append((f"rescaled iid mean {off.mean():.1e}", abs(off.mean()) <= 1e-9))
    checks.append((f"rescaled iid var-1 {off.var() - 1:.1e}", abs(off.var() - 1) <= 1e-9))
    checks.append(("duplicated client below baseline mean", nat.values[0, 3] < iid.off_diagonal.mean()))
    checks.append(("monotone 0 < 1 < 3", nat.values[0, 3] < nat.values[0, 1] < nat.values[0, 2]))
    report = heterogeneity_report(fed, seed=0, reps=10)
    checks.append(("report entropy = 2", report.summary()["entropy"] == 2.0))
    return checks


@guarded(9, "log-rank: identical groups, chi-square quantile, hand instance")
def test_criterion_09_logrank():
    g = ([1.0, 2.0, 4.0, 5.0, 7.0], [1, 0, 1, 1, 0])
    same = logrank_test(g, g)
    hand = logrank_test(([1.0, 2.0], [1, 1]), ([3.0, 4.0], [1, 1]))
    E = 1 / 2 + 1 / 3
    V = 1 / 4 + 2 / 9
    return [
        ("identical -> p = 1", same.p_value == 1.0),
        (f"sf(3.841459) = {chi2_sf(3.841459, 1):.6f}", abs(chi2_sf(3.841459, 1) - 0.05) <= 1e-4),
        (f"hand statistic {hand.statistic:.9f}", abs(hand.statistic - (2 - E) ** 2 / V) <= 1e-9),
        ("hand statistic 2.88235", abs(hand.statistic - 49 / 17) <= 1e-9),
    ]


@guarded(10, "DP: q=1 RDP exact, epsilon monotone, sigma sweep trades accuracy for privacy")
def test_criterion_10_dp():
    checks = [("q=1 rdp = a/(2 s^2)", all(rdp_subsampled_gaussian(1.0, s, a) == a / (2 * s * s)
                                          for s in (0.5, 1.0, 2.0) for a in ORDERS))]
    mono = True
    for q in (0.01, 0.1, 0.5):
        for sigma in (0.7, 1.0, 2.0):
            eps = [compose_and_convert(PrivacyLedger(q, sigma), s, 1e-5) for s in (1, 10, 100, 1000)]
            mono &= all(b > a for a, b in zip(eps, eps[1:]))
        eps = [compose_and_convert(PrivacyLedger(q, s), 100, 1e-5) for s in (0.7, 1.0, 2.0, 4.0)]
        mono &= all(b < a for a, b in zip(eps, eps[1:]))
        eps = [compose_and_convert(PrivacyLedger(q, 1.0), 100, d) for d in (1e-7, 1e-5, 1e-3)]
        mono &= all(b < a for a, b in zip(eps, eps[1:]))
    checks.append(("epsilon monotone in steps / sigma / delta", mono))

    sigmas = [0.5, 1.0, 2.0, 4.0]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rows = dp_sweep(load_config("heart_like"), sigmas)
    acc = [r["metric_mean"] for r in rows]
    eps = [r["epsilon"] for r in rows]
    rho = stats.spearmanr(sigmas, acc).statistic
    checks.append((f"epsilon decreasing {['%.2f' % e for e in eps]}", all(b < a for a, b in zip(eps, eps[1:]))))
    checks.append((f"accuracy trend rho={rho:.2f} {['%.3f' % a for a in acc]}", rho < 0))
    return checks


@guarded(11, "personalization: E'=0 identity; fine-tuning helps on the label-skewed split")
def test_criterion_11_personalization():
    cfg = load_config("label_skew_2client")
    fed = cfg.load_dataset()
    model = cfg.build_model(fed)
    t_max = compute_round_budget(cfg.n_epochs_pooled, fed.n_train, fed.n_clients, cfg.batch_size, cfg.local_updates)
    glob, pers, ident = [], [], True
    for seed in cfg.seeds:
        params = train_strategy(fed, model, StrategyConfig("fedavg", 0.05, cfg.batch_size, cfg.local_updates,
                                                           t_max, seed)).params
        ident &= all(np.array_equal(p, params) for p in personalize(model, params, fed, 0, 0.05, 4, seed))
        glob.append(evaluate_federated(model, params, fed, "accuracy").mean)
        tuned = personalize(model, params, fed, 100, 0.05, 4, seed)
        pers.append(evaluate_federated(model, tuned, fed, "accuracy").mean)
    g, p = float(np.mean(glob)), float(np.mean(pers))
    return [("E'=0 returns the global model", ident), (f"personalized {p:.4f} >= global {g:.4f}", p >= g)]


@guarded(12, "determinism: results bytes identical across reruns, sequential vs parallel")
def test_criterion_12_determinism():
    import tempfile
    raw = {
        "name": "determinism",
        "dataset": {"synthetic": {"task": "binary", "n_features": 4,
                                  "clients": [{"size": 80}, {"size": 60, "shift": 1.0},
                                              {"size": 40, "label_skew": 0.5}]},
                    "seed": 3},
        "model": "logistic", "metric": "accuracy", "lr": 0.1, "batch_size": 4, "local_updates": 5,
        "n_epochs_pooled": 3, "seeds": [0, 1, 2],
        "strategies": [{"kind": k, "lr": 0.1} for k in ("fedavg", "scaffold", "fedadagrad", "fedadam",
                                                         "fedyogi", "cyclic")]
                      + [{"kind": "fedprox", "lr": 0.1, "mu": 0.1}],
    }
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        cfg = tmp / "cfg.json"
        cfg.write_text(json.dumps(raw))
        codes = [bench_main(["run", "--config", str(cfg), "--out", str(tmp / name)] + jobs)
                 for name, jobs in (("a", []), ("b", []), ("c", ["--jobs", "4"]))]
        outs = {name: ((tmp / name / "results.csv").read_bytes(), (tmp / name / "results.json").read_bytes())
                for name in "abc"}
    return [("exit codes 0", codes == [0, 0, 0]),
            ("rerun identical", outs["a"] == outs["b"]),
            ("parallel identical", outs["a"] == outs["c"]),
            ("non-empty", outs["a"][0].count(b"\n") > 1)]


if __name__ == "__main__":
    failures = 0
    for name, fn in sorted(globals().items()):
        if name.startswith("test_criterion_"):
            try:
                fn()
            except Exception:  # the FAIL line is already printed
                failures += 1
    sys.exit(1 if failures else 0)
