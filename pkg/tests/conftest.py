import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hnervf.model import ClusteredDataset

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

# criterion number -> summary line, filled in by test_acceptance.py
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


def random_dataset(rng, m=15, n_range=(1, 7), p=2, q=2, tau2=1.0, gamma=None, beta=None, z_scale=1.0):
    """Heteroscedastic dataset with x, z ~ U(0, 2) and exponential variances."""
    sizes = rng.integers(n_range[0], n_range[1] + 1, m)
    sizes[0] = max(sizes[0], 3)
    N = int(sizes.sum())
    X = np.column_stack([np.ones(N)] + [rng.uniform(0, 2, N) for _ in range(p - 1)])
    Z = np.column_stack([np.ones(N)] + [z_scale * rng.uniform(0, 2, N) for _ in range(q - 1)])
    beta = np.linspace(1.0, 0.5, p) if beta is None else np.asarray(beta)
    gamma = np.r_[0.2, -0.3 * np.ones(q - 1)] if gamma is None else np.asarray(gamma)
    ids = np.repeat(np.arange(m), sizes)
    v = rng.normal(0, np.sqrt(tau2), m)
    e = rng.normal(0, 1, N) * np.exp(0.5 * Z @ gamma)
    y = X @ beta + v[ids] + e
    return ClusteredDataset.from_arrays(ids, y, X, Z)


def homoscedastic_dataset(rng, m=12, n_range=(2, 6), p=2, balanced=False, cluster_level_x=False):
    sizes = np.full(m, n_range[1]) if balanced else rng.integers(n_range[0], n_range[1] + 1, m)
    N = int(sizes.sum())
    ids = np.repeat(np.arange(m), sizes)
    if cluster_level_x:
        xs = rng.uniform(0, 2, (m, p - 1))[ids]
    else:
        xs = rng.uniform(0, 2, (N, p - 1))
    X = np.column_stack([np.ones(N), xs])
    y = X @ np.linspace(1, 2, p) + rng.normal(0, 1.0, m)[ids] + rng.normal(0, 0.7, N)
    return ClusteredDataset.from_arrays(ids, y, X, np.ones((N, 1)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
