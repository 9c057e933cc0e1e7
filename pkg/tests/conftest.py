import numpy as np
import pytest

from stgp.model import ModelState, PanelDataset, Subject


def batch_se(x, n_batches=50):
    """Monte Carlo standard error of the mean of a (possibly autocorrelated) series."""
    x = np.asarray(x, dtype=float)
    m = x.shape[0] // n_batches
    means = x[: m * n_batches].reshape(n_batches, m, *x.shape[1:]).mean(axis=1)
    return means.std(axis=0, ddof=1) / np.sqrt(n_batches)


def iid_se(x):
    x = np.asarray(x, dtype=float)
    return x.std(axis=0, ddof=1) / np.sqrt(x.shape[0])


def make_state(N, P=3, L=4, G=1, **over):
    st = ModelState(
        a=1.3, beta_raw=np.linspace(1.0, 0.4, P), xi=np.linspace(0.5, 1.5, L + 1), delta=0.4,
        sigma2=0.7, d2=0.2, nu=6.0, rho1_sq=1.2, rho2=0.9, lam=np.ones(G), tau=0.5,
        b=np.linspace(-0.3, 0.3, N), s=np.linspace(0.2, 1.0, N), u=np.linspace(0.6, 1.4, N),
    )
    for k, v in over.items():
        setattr(st, k, v)
    return st


def make_dataset(rng, N=3, P=3, teeth=(2, 3, 1), normal=(0,), groups=((1, 2),)):
    subs = []
    for i in range(N):
        n = teeth[i % len(teeth)]
        X = rng.uniform(-1, 1, (n, P))
        X /= 1.01 * np.linalg.norm(X, axis=1, keepdims=True).max()
        subs.append(Subject(f"s{i}", rng.normal(2, 1, n), rng.normal(3, 1, n), X))
    return PanelDataset(tuple(subs), groups, normal)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
