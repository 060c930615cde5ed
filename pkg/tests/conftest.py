import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from trajclust.dataset import MultiStateDataset, TransitionSpec

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def random_dataset(rng, n=8, p=3, K=2, censor=0.3, subsets=False, ties=False):
    """Small chain cohort with random covariates, times and censoring."""
    spec = TransitionSpec.chain(K)
    X = rng.normal(size=(n, p))
    times = np.zeros((n, K))
    events = np.zeros((n, K), dtype=np.int8)
    alive = np.ones(n, dtype=bool)
    for k in range(K):
        t = rng.exponential(size=n) + 0.05
        if ties:
            t = np.round(t, 1) + 0.1
        ev = (rng.uniform(size=n) > censor) & alive
        times[alive, k] = t[alive]
        events[ev, k] = 1
        alive = ev
    if subsets and p > 1:
        index = [np.sort(rng.choice(p, size=rng.integers(1, p + 1), replace=False)) for _ in range(K)]
        index[0] = np.arange(p)  # every column used somewhere
    else:
        index = [np.arange(p)] * K
    return MultiStateDataset(
        spec=spec,
        patient_ids=[f"p{i}" for i in range(n)],
        X=X,
        feature_names=[f"f{j}" for j in range(p)],
        feature_index=index,
        times=times,
        events=events,
    )


def random_beta(rng, ds, scale=0.5):
    return [rng.normal(scale=scale, size=len(ix)) for ix in ds.feature_index]


def random_row_stochastic(rng, n, density=1.0):
    S = rng.uniform(size=(n, n)) * (rng.uniform(size=(n, n)) < density)
    np.fill_diagonal(S, 0.0)
    empty = S.sum(axis=1) == 0
    for i in np.flatnonzero(empty):
        S[i, (i + 1) % n] = 1.0
    return S / S.sum(axis=1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria record one line each; printed at the end of the run
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
