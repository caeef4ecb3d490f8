"""Federated tabular datasets: containers, CSV interchange, synthetic clients and
Dirichlet resplitting.

Samples are stored column-wise per split. ``Split.x`` is an ``(n, d)`` float
array; the layout of ``Split.y`` depends on the task:

* ``binary`` / ``multiclass``: ``(n,)`` integer class index
* ``survival``: ``(n, 2)`` float array of ``(time, event)``
* ``mask``: ``(n, m)`` integer array of 0/1 voxels
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

TASKS = ("binary", "multiclass", "survival", "mask")


class DatasetError(ValueError):
    """Raised when a dataset violates its structural invariants."""


class DatasetParseError(DatasetError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


@dataclass(frozen=True, eq=False)
class Split:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim != 2:
            raise DatasetError(f"features must be 2-D, got shape {x.shape}")
        y = np.asarray(self.y)
        if len(y) != len(x):
            raise DatasetError(f"{len(x)} feature rows but {len(y)} labels")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return len(self.x)

    def __eq__(self, other):
        if not isinstance(other, Split):
            return NotImplemented
        return (
            self.x.shape == other.x.shape
            and self.y.shape == other.y.shape
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
        )

    def take(self, idx) -> "Split":
        return Split(self.x[idx], self.y[idx])

    @staticmethod
    def concat(splits: Sequence["Split"]) -> "Split":
        return Split(
            np.concatenate([s.x for s in splits]),
            np.concatenate([s.y for s in splits]),
        )


@dataclass(frozen=True)
class ClientDataset:
    client_id: str
    train: Split
    test: Split

    @property
    def n_train(self) -> int:
        return len(self.train)


@dataclass(frozen=True)
class FederatedDataset:
    """Ordered list of clients sharing one task and feature dimension.

    ``n_classes`` is meaningful for classification tasks only; ``notes`` holds
    non-fatal warnings produced while building the dataset (empty clients, ...).
    """

    clients: tuple[ClientDataset, ...]
    task: str
    n_classes: int = 2
    notes: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "clients", tuple(self.clients))
        if not self.clients:
            raise DatasetError("no clients")
        if self.task not in TASKS:
            raise DatasetError(f"unknown task {self.task!r}")
        d = self.clients[0].train.x.shape[1]
        for c in self.clients:
            for split in (c.train, c.test):
                if split.x.shape[1] != d:
                    raise DatasetError(
                        f"client {c.client_id!r}: feature dimension {split.x.shape[1]} != {d}"
                    )
                _check_labels(split.y, self.task, self.n_classes, c.client_id)

    @property
    def d(self) -> int:
        return self.clients[0].train.x.shape[1]

    @property
    def n_clients(self) -> int:
        return len(self.clients)

    @property
    def train_sizes(self) -> list[int]:
        return [len(c.train) for c in self.clients]

    @property
    def n_train(self) -> int:
        return sum(self.train_sizes)

    def replace_clients(self, clients, notes=()) -> "FederatedDataset":
        return FederatedDataset(tuple(clients), self.task, self.n_classes, tuple(notes))


def _check_labels(y: np.ndarray, task: str, n_classes: int, client_id: str) -> None:
    if len(y) == 0:
        return
    where = f"client {client_id!r}"
    if task in ("binary", "multiclass"):
        if y.ndim != 1:
            raise DatasetError(f"{where}: class labels must be 1-D")
        hi = 2 if task == "binary" else n_classes
        if y.min() < 0 or y.max() >= hi:
            raise DatasetError(f"{where}: class label outside [0, {hi})")
    elif task == "survival":
        if y.ndim != 2 or y.shape[1] != 2:
            raise DatasetError(f"{where}: survival labels must be (n, 2) [time, event]")
        if np.any(y[:, 0] <= 0):
            raise DatasetError(f"{where}: survival times must be > 0")
        if not np.all(np.isin(y[:, 1], (0, 1))):
            raise DatasetError(f"{where}: event indicator must be 0 or 1")
    elif task == "mask":
        if y.ndim != 2 or not np.all(np.isin(y, (0, 1))):
            raise DatasetError(f"{where}: masks must be (n, m) arrays of 0/1")


def pooled_view(fed: FederatedDataset, client_id: str = "pooled") -> ClientDataset:
    """Concatenate every client's train (and test) split, in client order."""
    if len(fed.clients) == 1:
        return fed.clients[0]
    return ClientDataset(
        client_id,
        Split.concat([c.train for c in fed.clients]),
        Split.concat([c.test for c in fed.clients]),
    )


def shuffle_clients(fed: FederatedDataset, seed: int = 0) -> FederatedDataset:
    """IID variant: pool train and test separately, shuffle, and deal samples
    back out keeping every client's train and test sizes."""
    rng = np.random.default_rng([seed, 4])
    parts = {}
    for name in ("train", "test"):
        splits = [getattr(c, name) for c in fed.clients]
        pooled = Split.concat(splits)
        perm = rng.permutation(len(pooled))
        bounds = np.cumsum([0] + [len(s) for s in splits])
        parts[name] = [pooled.take(perm[bounds[k]:bounds[k + 1]]) for k in range(len(splits))]
    clients = [ClientDataset(c.client_id, tr, te)
               for c, tr, te in zip(fed.clients, parts["train"], parts["test"])]
    return fed.replace_clients(clients, fed.notes)


# ---------------------------------------------------------------------------
# Dirichlet resplitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DirichletSplitConfig:
    k_prime: int
    alpha: float
    seed: int = 0

    def __post_init__(self):
        if self.k_prime < 1:
            raise ValueError("k_prime must be >= 1")
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")


ALPHA_WARN_THRESHOLD = 0.5


def _resplit_streams(cfg: DirichletSplitConfig):
    ss_p, ss_assign = np.random.SeedSequence(cfg.seed).spawn(2)
    return np.random.default_rng(ss_p), np.random.default_rng(ss_assign)


def dirichlet_proportions(n_original: int, cfg: DirichletSplitConfig) -> np.ndarray:
    """Row k is the probability vector p_k ~ Dir(alpha) over the new clients.

    This is exactly the matrix used by :func:`dirichlet_resplit` for the same
    config.
    """
    rng, _ = _resplit_streams(cfg)
    return _draw_proportions(rng, n_original, cfg)


def _draw_proportions(rng, n_original, cfg):
    out = np.empty((n_original, cfg.k_prime))
    for k in range(n_original):
        g = rng.standard_gamma(cfg.alpha, size=cfg.k_prime)
        total = g.sum()
        if total > 0:
            out[k] = g / total
        else:
            # every gamma draw underflowed (tiny alpha): all mass on one client
            out[k] = 0.0
            out[k, rng.integers(cfg.k_prime)] = 1.0
    return out


def dirichlet_resplit(fed: FederatedDataset, cfg: DirichletSplitConfig) -> FederatedDataset:
    """Reassign every sample of original client k to a new client drawn from p_k.

    Train and test splits are reassigned independently with the same p_k.
    Within a new client, samples keep their original order (original client
    order first). Empty new clients are kept and reported in ``notes``.
    """
    notes = []
    if cfg.alpha < ALPHA_WARN_THRESHOLD:
        msg = f"alpha={cfg.alpha} < {ALPHA_WARN_THRESHOLD}: empty clients are likely"
        warnings.warn(msg, stacklevel=2)
        notes.append(msg)

    rng_p, rng_assign = _resplit_streams(cfg)
    props = _draw_proportions(rng_p, fed.n_clients, cfg)

    buckets = {"train": [[] for _ in range(cfg.k_prime)], "test": [[] for _ in range(cfg.k_prime)]}
    for k, client in enumerate(fed.clients):
        for name in ("train", "test"):
            split = getattr(client, name)
            if cfg.k_prime == 1:
                assign = np.zeros(len(split), dtype=int)
            else:
                assign = rng_assign.choice(cfg.k_prime, size=len(split), p=props[k])
            for j in range(cfg.k_prime):
                idx = np.flatnonzero(assign == j)
                buckets[name][j].append(split.take(idx))

    clients = []
    for j in range(cfg.k_prime):
        train = Split.concat(buckets["train"][j])
        test = Split.concat(buckets["test"][j])
        if len(train) == 0 or len(test) == 0:
            which = "train" if len(train) == 0 else "test"
            msg = f"client {j} has an empty {which} split"
            warnings.warn(msg, stacklevel=2)
            notes.append(msg)
        clients.append(ClientDataset(str(j), train, test))
    return fed.replace_clients(clients, notes)


# ---------------------------------------------------------------------------
# Synthetic generators
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClientSpec:
    """Per-client generator knobs.

    ``shift`` is added to standard-normal features (scalar broadcast or a
    length-d vector), ``scale`` multiplies them. ``label_skew`` in [0, 1)
    forces class proportions towards ``dominant_class`` (defaults to the
    client index modulo the class count); 0 keeps the natural proportions.
    """

    size: int
    shift: float | tuple[float, ...] = 0.0
    scale: float = 1.0
    label_skew: float = 0.0
    dominant_class: int | None = None


@dataclass(frozen=True)
class SynthSpec:
    task: str
    n_features: int
    clients: tuple[ClientSpec, ...]
    n_classes: int = 2
    coef: tuple[float, ...] | None = None
    intercept: float = 0.0
    signal: float = 1.0
    test_fraction: float = 0.2
    # survival only
    baseline_hazard: float = 1.0
    censoring_rate: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "clients", tuple(self.clients))
        if self.n_features < 1:
            raise ValueError("n_features must be >= 1")
        if not self.clients:
            raise ValueError("at least one client is required")
        for c in self.clients:
            if c.size < 1:
                raise ValueError("client sizes must be >= 1")
            if not 0 <= c.label_skew < 1:
                raise ValueError("label_skew must lie in [0, 1)")
        if not 0 <= self.censoring_rate < 1:
            raise ValueError("censoring_rate must lie in [0, 1)")
        if not 0 <= self.test_fraction < 1:
            raise ValueError("test_fraction must lie in [0, 1)")

    @classmethod
    def from_dict(cls, raw: dict) -> "SynthSpec":
        raw = dict(raw)
        clients = []
        for c in raw.pop("clients"):
            c = dict(c)
            if isinstance(c.get("shift"), list):
                c["shift"] = tuple(c["shift"])
            clients.append(ClientSpec(**c))
        if raw.get("coef") is not None:
            raw["coef"] = tuple(raw["coef"])
        return cls(clients=tuple(clients), **raw)


def _client_features(rng, spec: SynthSpec, cspec: ClientSpec, n: int) -> np.ndarray:
    shift = np.broadcast_to(np.asarray(cspec.shift, dtype=float), (spec.n_features,))
    return cspec.scale * rng.standard_normal((n, spec.n_features)) + shift


def _true_coef(spec: SynthSpec, rng, n_out: int) -> np.ndarray:
    if spec.coef is not None:
        coef = np.asarray(spec.coef, dtype=float)
        return coef.reshape(spec.n_features, -1) if n_out > 1 else coef
    shape = (spec.n_features, n_out) if n_out > 1 else (spec.n_features,)
    w = rng.standard_normal(shape)
    return spec.signal * w / np.sqrt(spec.n_features)


def _split_train_test(x, y, test_fraction, cid):
    n_test = int(round(test_fraction * len(x)))
    n_train = len(x) - n_test
    return ClientDataset(cid, Split(x[:n_train], y[:n_train]), Split(x[n_train:], y[n_train:]))


def gen_synthetic_classification(spec: SynthSpec, seed: int = 0) -> FederatedDataset:
    """Gaussian features per client and labels from one shared linear model.

    Labels are sampled from the ground-truth logistic/softmax model. A client
    with ``label_skew > 0`` keeps drawing candidates until its class quotas
    are filled, which shifts its label marginal while keeping p(y|x) shared.
    """
    if spec.task not in ("binary", "multiclass"):
        raise ValueError(f"classification generator cannot build task {spec.task!r}")
    n_classes = 2 if spec.task == "binary" else spec.n_classes
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    ss_coef, *ss_clients = np.random.SeedSequence(seed).spawn(1 + len(spec.clients))
    coef = _true_coef(spec, np.random.default_rng(ss_coef), 1 if n_classes == 2 else n_classes)

    def draw_labels(rng, x):
        if n_classes == 2:
            p = 1.0 / (1.0 + np.exp(-(x @ coef + spec.intercept)))
            return (rng.random(len(x)) < p).astype(np.int64)
        logits = x @ coef + spec.intercept
        logits -= logits.max(axis=1, keepdims=True)
        prob = np.exp(logits)
        prob /= prob.sum(axis=1, keepdims=True)
        u = rng.random((len(x), 1))
        return np.minimum((prob.cumsum(axis=1) < u).sum(axis=1), n_classes - 1).astype(np.int64)

    clients = []
    for k, (cspec, ss) in enumerate(zip(spec.clients, ss_clients)):
        rng = np.random.default_rng(ss)
        if cspec.label_skew == 0:
            x = _client_features(rng, spec, cspec, cspec.size)
            y = draw_labels(rng, x)
        else:
            x, y = _fill_quotas(rng, spec, cspec, k, n_classes, draw_labels)
        clients.append(_split_train_test(x, y, spec.test_fraction, str(k)))
    return FederatedDataset(tuple(clients), spec.task, n_classes)


def _class_quotas(size, skew, dominant, n_classes):
    target = np.full(n_classes, (1 - skew) / n_classes)
    target[dominant] += skew
    quotas = np.floor(target * size).astype(int)
    # hand out the rounding remainder by largest fractional part
    rest = size - quotas.sum()
    order = np.argsort(-(target * size - quotas), kind="stable")
    quotas[order[:rest]] += 1
    return quotas


def _fill_quotas(rng, spec, cspec, k, n_classes, draw_labels, max_draws=200):
    dominant = cspec.dominant_class if cspec.dominant_class is not None else k % n_classes
    quotas = _class_quotas(cspec.size, cspec.label_skew, dominant, n_classes)
    xs, ys = [], []
    filled = np.zeros(n_classes, dtype=int)
    for _ in range(max_draws):
        x = _client_features(rng, spec, cspec, max(64, 2 * cspec.size))
        y = draw_labels(rng, x)
        for xi, yi in zip(x, y):
            if filled[yi] < quotas[yi]:
                xs.append(xi)
                ys.append(yi)
                filled[yi] += 1
        if np.array_equal(filled, quotas):
            return np.asarray(xs), np.asarray(ys, dtype=np.int64)
    raise ValueError(f"client {k}: could not fill class quotas {quotas.tolist()}; reduce label_skew")


CENSORING_BISECTION_STEPS = 20


def _expected_censoring(log_rate: float, hazards: np.ndarray) -> float:
    lam = math.exp(log_rate)
    return float(np.mean(lam / (lam + hazards)))


def censoring_rate_parameter(hazards: np.ndarray, target: float) -> float:
    """Exponential censoring rate giving an expected censored fraction ``target``.

    With event rate h_i and censoring rate c, P(censored) = c / (c + h_i).
    Solved by bisection in log-space.
    """
    if target <= 0:
        return 0.0
    lo = math.log(hazards.min() * target / (1 - target)) - 1.0
    hi = math.log(hazards.max() * target / (1 - target)) + 1.0
    for _ in range(CENSORING_BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        if _expected_censoring(mid, hazards) < target:
            lo = mid
        else:
            hi = mid
    return math.exp(0.5 * (lo + hi))


def gen_synthetic_survival(spec: SynthSpec, seed: int = 0) -> FederatedDataset:
    """Cox-model survival data with constant baseline hazard and exponential censoring."""
    if spec.task != "survival":
        raise ValueError(f"survival generator cannot build task {spec.task!r}")
    ss_coef, ss_cens, *ss_clients = np.random.SeedSequence(seed).spawn(2 + len(spec.clients))
    coef = _true_coef(spec, np.random.default_rng(ss_coef), 1)
    xs = [
        _client_features(np.random.default_rng(ss), spec, c, c.size)
        for c, ss in zip(spec.clients, ss_clients)
    ]
    hazards = [spec.baseline_hazard * np.exp(x @ coef) for x in xs]
    cens_rate = censoring_rate_parameter(np.concatenate(hazards), spec.censoring_rate)

    rng = np.random.default_rng(ss_cens)
    clients = []
    for k, (x, h) in enumerate(zip(xs, hazards)):
        event_t = rng.exponential(1.0 / h)
        if cens_rate > 0:
            cens_t = rng.exponential(1.0 / cens_rate, size=len(x))
        else:
            cens_t = np.full(len(x), np.inf)
        t = np.minimum(event_t, cens_t)
        t = np.maximum(t, np.finfo(float).tiny)
        y = np.column_stack([t, (event_t <= cens_t).astype(float)])
        clients.append(_split_train_test(x, y, spec.test_fraction, str(k)))
    return FederatedDataset(tuple(clients), "survival")


def generate(spec: SynthSpec, seed: int = 0) -> FederatedDataset:
    if spec.task == "survival":
        return gen_synthetic_survival(spec, seed)
    return gen_synthetic_classification(spec, seed)


# ---------------------------------------------------------------------------
# CSV interchange
# ---------------------------------------------------------------------------

def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def _label_columns(fed: FederatedDataset) -> list[str]:
    if fed.task in ("binary", "multiclass"):
        return ["label"]
    if fed.task == "survival":
        return ["time", "event"]
    m = next((c.train.y.shape[1] for c in fed.clients if len(c.train)), None)
    if m is None:
        m = next(c.test.y.shape[1] for c in fed.clients)
    return [f"m{i}" for i in range(m)]


def save_csv(fed: FederatedDataset, path) -> None:
    path = Path(path)
    header = ["client_id", "split", *_label_columns(fed), *[f"f{i}" for i in range(fed.d)]]
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for c in fed.clients:
            for name in ("train", "test"):
                split = getattr(c, name)
                for x, y in zip(split.x, split.y):
                    if fed.task in ("binary", "multiclass"):
                        labels = [str(int(y))]
                    elif fed.task == "survival":
                        labels = [_fmt(y[0]), str(int(y[1]))]
                    else:
                        labels = [str(int(v)) for v in y]
                    writer.writerow([c.client_id, name, *labels, *map(_fmt, x)])


def load_csv(path, task: str | None = None, n_classes: int | None = None) -> FederatedDataset:
    """Read a federated dataset written in the one-row-per-sample CSV schema.

    The task is inferred from the label columns; a ``label`` column is read as
    binary when every value is 0/1 and as multiclass otherwise (override with
    ``task`` / ``n_classes``).
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetParseError("no clients (empty file)", 1) from None
        label_cols, n_feat, inferred = _parse_header(header)
        rows: dict[str, dict[str, list]] = {}
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise DatasetParseError(f"expected {len(header)} fields, got {len(row)}", line)
            cid, split = row[0], row[1]
            if split not in ("train", "test"):
                raise DatasetParseError(f"split must be 'train' or 'test', got {split!r}", line)
            try:
                label = _parse_label(row[2:2 + len(label_cols)], inferred)
                feats = [float(v) for v in row[2 + len(label_cols):]]
            except ValueError as exc:
                raise DatasetParseError(str(exc), line) from None
            if not all(math.isfinite(v) for v in feats):
                raise DatasetParseError("non-finite feature value", line)
            bucket = rows.setdefault(cid, {"train": [], "test": []})
            bucket[split].append((label, feats))
    if not rows:
        raise DatasetParseError("no clients")

    task = task or inferred
    if task == "class":
        all_labels = [lab for b in rows.values() for s in b.values() for lab, _ in s]
        task = "binary" if set(all_labels) <= {0, 1} else "multiclass"
    if task in ("binary", "multiclass") and n_classes is None:
        all_labels = [lab for b in rows.values() for s in b.values() for lab, _ in s]
        n_classes = 2 if task == "binary" else max(all_labels) + 1

    clients = []
    for cid, bucket in rows.items():
        splits = {}
        for name in ("train", "test"):
            items = bucket[name]
            x = np.array([f for _, f in items], dtype=float).reshape(len(items), n_feat)
            if task in ("binary", "multiclass"):
                y = np.array([lab for lab, _ in items], dtype=np.int64)
            elif task == "survival":
                y = np.array([lab for lab, _ in items], dtype=float).reshape(len(items), 2)
            else:
                y = np.array([lab for lab, _ in items], dtype=np.int64).reshape(len(items), len(label_cols))
            splits[name] = Split(x, y)
        clients.append(ClientDataset(cid, splits["train"], splits["test"]))
    return FederatedDataset(tuple(clients), task, n_classes or 2)


def _parse_header(header):
    if header[:2] != ["client_id", "split"]:
        raise DatasetParseError("header must start with 'client_id,split'", 1)
    rest = header[2:]
    if rest[:1] == ["label"]:
        label_cols, inferred = ["label"], "class"
    elif rest[:2] == ["time", "event"]:
        label_cols, inferred = ["time", "event"], "survival"
    else:
        label_cols = []
        while len(label_cols) < len(rest) and rest[len(label_cols)] == f"m{len(label_cols)}":
            label_cols.append(rest[len(label_cols)])
        if not label_cols:
            raise DatasetParseError("unrecognised label columns", 1)
        inferred = "mask"
    feats = rest[len(label_cols):]
    if feats != [f"f{i}" for i in range(len(feats))] or not feats:
        raise DatasetParseError("feature columns must be f0..f{d-1}", 1)
    return label_cols, len(feats), inferred


def _parse_label(fields, kind):
    if kind == "class":
        v = int(fields[0])
        if v < 0:
            raise ValueError(f"negative class label {v}")
        return v
    if kind == "survival":
        t = float(fields[0])
        if not t > 0:
            raise ValueError(f"survival time must be > 0, got {fields[0]!r}")
        if fields[1] not in ("0", "1"):
            raise ValueError(f"event must be 0 or 1, got {fields[1]!r}")
        return (t, float(fields[1]))
    out = []
    for f in fields:
        if f not in ("0", "1"):
            raise ValueError(f"mask value must be 0 or 1, got {f!r}")
        out.append(int(f))
    return out
