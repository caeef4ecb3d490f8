import warnings

import numpy as np
import pytest

from fedsilo.data import ClientDataset, FederatedDataset, Split


def make_binary_fed(sizes, d=3, seed=0, shift=None, test_size=10):
    """Small logistic task with a shared true model; optional per-client shift."""
    rng = np.random.default_rng(seed)
    coef = rng.normal(size=d)
    clients = []
    for k, n in enumerate(sizes):
        s = 0.0 if shift is None else shift[k]
        x = rng.normal(size=(n + test_size, d)) + s
        y = (rng.random(n + test_size) < 1 / (1 + np.exp(-x @ coef))).astype(np.int64)
        clients.append(ClientDataset(str(k), Split(x[:n], y[:n]), Split(x[n:], y[n:])))
    return FederatedDataset(tuple(clients), "binary")


@pytest.fixture
def binary_fed():
    return make_binary_fed([30, 50, 40])


@pytest.fixture(autouse=True)
def _quiet_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        yield


# verdict lines appended by tests/test_acceptance.py
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
