"""Quantifying how far a natural client split is from an i.i.d. one.

Pipeline: client-size entropy, optional PCA down to 16 dimensions, pairwise
squared minibatch Wasserstein-2 (features, continuous labels) or total
variation (discrete labels), an i.i.d. baseline with the same client sizes,
and standardisation of both matrices against the baseline. Kaplan-Meier
curves and the two-group log-rank test cover survival tasks.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from scipy.special import gammaincc

from .data import ClientDataset, FederatedDataset, Split

PCA_DIM = 16
DEFAULT_BATCH = 64
DEFAULT_REPS = 50
IID_STREAM = 2


class DegenerateBaselineError(ValueError):
    pass


class UndefinedTestError(ValueError):
    pass


def client_entropy(sizes: Sequence[int]) -> float:
    """Entropy in bits of the sample distribution across clients."""
    sizes = np.asarray(sizes, dtype=float)
    if sizes.size == 0:
        raise ValueError("empty size list")
    if np.any(sizes < 1):
        raise ValueError("client sizes must be >= 1")
    p = sizes / sizes.sum()
    return float(-np.sum(p * np.log2(p)) + 0.0)


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (k, d), orthonormal rows
    explained_variance: np.ndarray

    def transform(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) @ self.components.T

    def inverse_transform(self, z) -> np.ndarray:
        return np.asarray(z) @ self.components + self.mean


def pca_fit(x, target_dim: int = PCA_DIM) -> PcaModel:
    """Top principal directions of the centred data (at most ``target_dim``,
    fewer when the data is rank deficient). Each component's first
    non-negligible coordinate is made positive."""
    x = np.asarray(x, dtype=float)
    n, d = x.shape
    if n < 2:
        raise ValueError("PCA needs at least two samples")
    mean = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    tol = s[0] * max(n, d) * np.finfo(float).eps if s.size else 0.0
    rank = int(np.sum(s > tol))
    k = min(rank, target_dim)
    comps = vt[:k].copy()
    for row in comps:
        lead = np.flatnonzero(np.abs(row) > 1e-12)
        if lead.size and row[lead[0]] < 0:
            row *= -1
    return PcaModel(mean, comps, s[:k] ** 2 / (n - 1))


def pca_transform(model: PcaModel, x) -> np.ndarray:
    return model.transform(x)


# ---------------------------------------------------------------------------
# Distances
# ---------------------------------------------------------------------------

def exact_assignment_w2(a, b) -> float:
    """Squared W2 between two uniform point clouds of equal size, solved as an
    exact linear assignment on squared Euclidean costs."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if len(a) != len(b) or len(a) == 0:
        raise ValueError(f"point sets must be non-empty and of equal size ({len(a)} vs {len(b)})")
    cost = cdist(a, b, "sqeuclidean")
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum() / len(a))


def minibatch_w2(a, b, batch_size: int, reps: int = DEFAULT_REPS, seed: int = 0) -> float:
    """Mean exact W2^2 over ``reps`` pairs of random size-``batch_size`` subsets.

    Subsets of ``a`` and ``b`` are drawn from two generators seeded
    identically, so identical inputs give identical subsets.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if batch_size < 1 or batch_size > min(len(a), len(b)):
        raise ValueError(f"batch size {batch_size} exceeds a client ({len(a)}, {len(b)} points)")
    if reps < 1:
        raise ValueError("reps must be >= 1")
    rng_a = np.random.default_rng(seed)
    rng_b = np.random.default_rng(seed)
    total = 0.0
    for _ in range(reps):
        ia = rng_a.choice(len(a), size=batch_size, replace=False)
        ib = rng_b.choice(len(b), size=batch_size, replace=False)
        total += exact_assignment_w2(a[ia], b[ib])
    return total / reps


def total_variation(p, q) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    for v in (p, q):
        if np.any(v < 0) or abs(v.sum() - 1.0) > 1e-9:
            raise ValueError("inputs must be probability vectors")
    if p.shape != q.shape:
        raise ValueError("histograms must have the same length")
    return float(0.5 * np.abs(p - q).sum())


@dataclass(frozen=True)
class DistanceMatrix:
    values: np.ndarray
    sizes: tuple[int, ...]
    kind: str = "natural"
    rescaled: bool = False
    metric: str = "w2sq"

    @property
    def off_diagonal(self) -> np.ndarray:
        iu = np.triu_indices(len(self.values), k=1)
        return self.values[iu]

    def to_csv(self, path, client_ids: Optional[Sequence[str]] = None) -> None:
        ids = list(client_ids) if client_ids is not None else [str(i) for i in range(len(self.values))]
        lines = [
            f"# kind={self.kind} rescaled={str(self.rescaled).lower()} metric={self.metric}",
            ",".join(["client", *ids]),
        ]
        for cid, row in zip(ids, self.values):
            lines.append(",".join([cid, *(format(float(v), ".17g") for v in row)]))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _client_data(client: ClientDataset) -> Split:
    return Split.concat([client.train, client.test])


def _cell_seed(seed, i, j):
    return int(np.random.SeedSequence([seed, i, j]).generate_state(1)[0])


def _label_vectors(fed: FederatedDataset, splits):
    if fed.task == "survival":
        ys = [s.y.astype(float) for s in splits]
        pooled = np.concatenate(ys)
        mu = pooled.mean(axis=0)
        sd = pooled.std(axis=0)
        sd[sd == 0] = 1.0
        return [(y - mu) / sd for y in ys]
    return [s.y.astype(float) for s in splits]


def _reduce(vectors):
    pooled = np.concatenate(vectors)
    if pooled.shape[1] <= PCA_DIM:
        return vectors
    model = pca_fit(pooled, PCA_DIM)
    return [model.transform(v) for v in vectors]


def _w2_matrix(vectors, batch_size, reps, seed):
    K = len(vectors)
    if batch_size is None:
        batch_size = min(DEFAULT_BATCH, min(len(v) for v in vectors))
    out = np.zeros((K, K))
    for i, j in itertools.combinations(range(K), 2):
        out[i, j] = out[j, i] = minibatch_w2(vectors[i], vectors[j], batch_size, reps,
                                             _cell_seed(seed, i, j))
    return out


def pairwise_distance_matrix(fed: FederatedDataset, on: str = "features", seed: int = 0,
                             batch_size: Optional[int] = None, reps: int = DEFAULT_REPS,
                             kind: str = "natural") -> DistanceMatrix:
    """Symmetric client-to-client distances on the pooled train+test samples.

    ``on="features"`` uses minibatch W2^2 after PCA when d > 16. ``on="labels"``
    uses total variation between class histograms for classification tasks and
    minibatch W2^2 otherwise (standardised (time, event) pairs for survival,
    mask vectors for segmentation).
    """
    if on not in ("features", "labels"):
        raise ValueError("on must be 'features' or 'labels'")
    splits = [_client_data(c) for c in fed.clients]
    sizes = tuple(len(s) for s in splits)
    if on == "labels" and fed.task in ("binary", "multiclass"):
        hists = [np.bincount(s.y, minlength=fed.n_classes) / len(s) for s in splits]
        K = len(hists)
        vals = np.zeros((K, K))
        for i, j in itertools.combinations(range(K), 2):
            vals[i, j] = vals[j, i] = total_variation(hists[i], hists[j])
        return DistanceMatrix(vals, sizes, kind, False, "tv")
    if on == "features":
        vectors = [s.x for s in splits]
    else:
        vectors = _label_vectors(fed, splits)
    vals = _w2_matrix(_reduce(vectors), batch_size, reps, seed)
    return DistanceMatrix(vals, sizes, kind, False, "w2sq")


def iid_resplit(fed: FederatedDataset, seed: int = 0) -> FederatedDataset:
    """Pool all samples, shuffle, and deal them back out with the original
    per-client sizes (train+test merged into train)."""
    splits = [_client_data(c) for c in fed.clients]
    pooled = Split.concat(splits)
    perm = np.random.default_rng([seed, IID_STREAM]).permutation(len(pooled))
    bounds = np.cumsum([0] + [len(s) for s in splits])
    clients = []
    for k, c in enumerate(fed.clients):
        part = pooled.take(perm[bounds[k]:bounds[k + 1]])
        clients.append(ClientDataset(c.client_id, part, part.take(slice(0, 0))))
    return fed.replace_clients(clients)


def iid_baseline_matrix(fed: FederatedDataset, on: str = "features", seed: int = 0,
                        batch_size: Optional[int] = None, reps: int = DEFAULT_REPS) -> DistanceMatrix:
    return pairwise_distance_matrix(iid_resplit(fed, seed), on, seed, batch_size, reps,
                                    kind="iid-baseline")


def rescale_against_iid(natural: DistanceMatrix, iid: DistanceMatrix):
    """Standardise both matrices with the mean / std of the i.i.d. off-diagonal set."""
    if natural.values.shape != iid.values.shape:
        raise ValueError("matrix shapes differ")
    if len(iid.values) < 3:
        raise DegenerateBaselineError("rescaling needs at least 3 clients")
    ref = iid.off_diagonal
    mu = ref.mean()
    sigma = ref.std()
    if sigma < 1e-12:
        raise DegenerateBaselineError(f"i.i.d. baseline has near-zero spread ({sigma:g})")

    def apply(m: DistanceMatrix) -> DistanceMatrix:
        return DistanceMatrix((m.values - mu) / sigma, m.sizes, m.kind, True, m.metric)

    return apply(natural), apply(iid)


@dataclass
class HeterogeneityReport:
    entropy: float
    matrices: dict[str, DistanceMatrix]

    def summary(self) -> dict:
        out = {"entropy": self.entropy}
        for on in ("features", "labels"):
            key = f"{on}/natural_rescaled"
            if key in self.matrices:
                off = self.matrices[key].off_diagonal
                out[f"{on}_mean"] = float(off.mean())
                out[f"{on}_max"] = float(off.max())
        return out


def heterogeneity_report(fed: FederatedDataset, seed: int = 0, batch_size: Optional[int] = None,
                         reps: int = DEFAULT_REPS) -> HeterogeneityReport:
    sizes = [len(c.train) + len(c.test) for c in fed.clients]
    mats = {}
    for on in ("features", "labels"):
        nat = pairwise_distance_matrix(fed, on, seed, batch_size, reps)
        iid = iid_baseline_matrix(fed, on, seed, batch_size, reps)
        mats[f"{on}/natural"] = nat
        mats[f"{on}/iid"] = iid
        if fed.n_clients >= 3:
            try:
                mats[f"{on}/natural_rescaled"], mats[f"{on}/iid_rescaled"] = rescale_against_iid(nat, iid)
            except DegenerateBaselineError:
                pass
    return HeterogeneityReport(client_entropy(sizes), mats)


# ---------------------------------------------------------------------------
# Survival curves
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SurvivalCurve:
    """Step function; ``times[0] == 0`` and ``survival[0] == 1``."""

    times: np.ndarray
    survival: np.ndarray

    def __call__(self, t):
        idx = np.searchsorted(self.times, np.asarray(t, dtype=float), side="right") - 1
        return self.survival[np.maximum(idx, 0)]


def kaplan_meier(times, events) -> SurvivalCurve:
    """Product-limit estimate over the distinct event times."""
    t = np.asarray(times, dtype=float)
    e = np.asarray(events)
    if t.size == 0:
        raise ValueError("empty input")
    if np.any(t <= 0):
        raise ValueError("times must be > 0")
    event_times = np.unique(t[e == 1])
    surv = [1.0]
    s = 1.0
    for u in event_times:
        at_risk = np.sum(t >= u)
        d = np.sum((t == u) & (e == 1))
        s *= 1.0 - d / at_risk
        surv.append(s)
    return SurvivalCurve(np.concatenate([[0.0], event_times]), np.asarray(surv))


def chi2_sf(x: float, df: int = 1) -> float:
    """Chi-square survival function via the regularised upper incomplete gamma."""
    if x <= 0:
        return 1.0
    return float(gammaincc(df / 2.0, x / 2.0))


@dataclass(frozen=True)
class LogRankResult:
    statistic: float
    p_value: float
    observed: float
    expected: float
    variance: float


def logrank_test(group_a, group_b) -> LogRankResult:
    """Two-group log-rank test; each group is a ``(times, events)`` pair."""
    ta, ea = (np.asarray(v, dtype=float) for v in group_a)
    tb, eb = (np.asarray(v, dtype=float) for v in group_b)
    if ta.size == 0 or tb.size == 0:
        raise ValueError("both groups must be non-empty")
    t = np.concatenate([ta, tb])
    e = np.concatenate([ea, eb])
    event_times = np.unique(t[e == 1])
    if event_times.size == 0:
        raise UndefinedTestError("no events in either group")
    observed = expected = variance = 0.0
    for u in event_times:
        n_a = np.sum(ta >= u)
        n_b = np.sum(tb >= u)
        n = n_a + n_b
        d_a = np.sum((ta == u) & (ea == 1))
        d = d_a + np.sum((tb == u) & (eb == 1))
        observed += d_a
        expected += d * n_a / n
        if n > 1:
            variance += n_a * n_b * d * (n - d) / (n * n * (n - 1))
    if variance <= 0:
        raise UndefinedTestError("zero variance")
    stat = (observed - expected) ** 2 / variance
    return LogRankResult(float(stat), chi2_sf(stat, 1), float(observed), float(expected),
                         float(variance))


def pairwise_logrank(fed: FederatedDataset) -> np.ndarray:
    """K x K matrix of log-rank p-values between clients (train+test pooled)."""
    if fed.task != "survival":
        raise ValueError("log-rank tests need a survival dataset")
    data = [_client_data(c) for c in fed.clients]
    K = len(data)
    out = np.ones((K, K))
    for i, j in itertools.combinations(range(K), 2):
        a = (data[i].y[:, 0], data[i].y[:, 1])
        b = (data[j].y[:, 0], data[j].y[:, 1])
        try:
            out[i, j] = out[j, i] = logrank_test(a, b).p_value
        except UndefinedTestError:
            out[i, j] = out[j, i] = math.nan
    return out
