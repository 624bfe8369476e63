import numpy as np
import pytest

from megmm.model import ExponentialIV, LinearIV


def linear_data(rng, n=200, m=3, p=1, misspec=0.5, hetero=True):
    """Linear IV sample with a direct instrument effect and heteroskedastic errors."""
    Z = rng.standard_normal((n, m))
    Pi = rng.uniform(0.5, 1.5, (m, p))
    v = rng.standard_normal((n, p))
    X = Z @ Pi + v
    scale = np.exp(0.3 * Z[:, 0]) if hetero else 1.0
    eps = 0.5 * v[:, 0] + scale * rng.standard_normal(n)
    gam = np.zeros(m)
    gam[-1] = misspec
    y = X @ np.ones(p) + Z @ gam + eps
    model = LinearIV(m, p)
    return model, model.dataset(y, X, Z)


def exp_data(rng, n=300, m=3, p=1):
    Z = np.column_stack([np.ones(n), rng.standard_normal((n, m - 1))])
    X = np.column_stack([np.ones(n), 0.5 * Z[:, 1:p] + 0.3 * rng.standard_normal((n, p - 1))])[:, :p] \
        if p > 1 else (0.5 * Z[:, 1] + 0.3 * rng.standard_normal(n))[:, None]
    mu = np.exp(X @ np.full(p, 0.3))
    y = rng.poisson(mu * np.exp(0.2 * Z[:, -1])).astype(float)
    model = ExponentialIV(m, p)
    return model, model.dataset(y, X, Z)


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
