import math
import warnings
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from trajclust.dataset import MultiStateDataset, TransitionSpec
from trajclust.errors import ValidationError
from trajclust.optimizer import Hyperparams
from trajclust.survival import (
    cox_neg_log_partial_likelihood,
    estimate_weights,
    prox_gradient_update,
    smooth_gradient,
    smooth_objective,
    soft_threshold,
    step1_objective,
    strata,
    zero_beta,
)

from conftest import random_beta, random_dataset, random_row_stochastic


def breslow_loop(ds, beta):
    """Direct double loop over events and risk sets."""
    total = 0.0
    for k in range(ds.K):
        X = ds.Xk(k)
        for i in range(ds.n):
            if not ds.events[i, k]:
                continue
            risk = [j for j in range(ds.n) if ds.at_risk[j, k] and ds.times[j, k] >= ds.times[i, k]]
            total -= X[i] @ beta[k] - math.log(sum(math.exp(X[j] @ beta[k]) for j in risk))
    return total


def one_transition(x, t, d):
    x = np.asarray(x, dtype=float).reshape(len(t), -1)
    n = len(t)
    return MultiStateDataset(TransitionSpec.chain(1), [str(i) for i in range(n)], x,
                             [f"x{j}" for j in range(x.shape[1])], [np.arange(x.shape[1])],
                             np.asarray(t, dtype=float).reshape(n, 1), np.asarray(d).reshape(n, 1))


def test_beta_zero_examples():
    ds = one_transition([0.0, 1.0], [1.0, 2.0], [1, 0])
    assert cox_neg_log_partial_likelihood(ds, [np.zeros(1)]) == pytest.approx(math.log(2))
    n = 6
    ds = one_transition(np.arange(n), np.arange(1.0, n + 1), np.ones(n, dtype=int))
    assert cox_neg_log_partial_likelihood(ds, [np.zeros(1)]) == pytest.approx(sum(math.log(m) for m in range(1, n + 1)))


def test_five_patient_hand_sum():
    x = [0.2, -1.0, 0.5, 1.5, 0.0]
    t = [3.0, 1.0, 2.0, 5.0, 4.0]
    d = [1, 1, 0, 1, 1]
    b = 0.5
    # sorted by time: 1.0 (x=-1, d), 2.0 (0.5, c), 3.0 (0.2, d), 4.0 (0.0, d), 5.0 (1.5, d)
    e = {v: math.exp(b * v) for v in x}
    hand = -(b * -1.0 - math.log(e[-1.0] + e[0.5] + e[0.2] + e[0.0] + e[1.5]))
    hand += -(b * 0.2 - math.log(e[0.2] + e[0.0] + e[1.5]))
    hand += -(b * 0.0 - math.log(e[0.0] + e[1.5]))
    hand += -(b * 1.5 - math.log(e[1.5]))
    ds = one_transition(x, t, d)
    assert cox_neg_log_partial_likelihood(ds, [np.array([b])]) == pytest.approx(hand, rel=1e-12)


@given(st.integers(0, 100_000))
def test_matches_breslow_loop_with_ties(seed):
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, n=9, p=3, K=2, ties=True, subsets=True)
    beta = random_beta(rng, ds)
    assert cox_neg_log_partial_likelihood(ds, beta) == pytest.approx(breslow_loop(ds, beta), rel=1e-10, abs=1e-10)


def test_time_shift_invariance(rng):
    ds = random_dataset(rng, n=12, p=3, K=2)
    beta = random_beta(rng, ds)
    shifted = replace(ds, times=np.where(ds.at_risk, ds.times + 7.25, 0.0))
    assert cox_neg_log_partial_likelihood(ds, beta) == cox_neg_log_partial_likelihood(shifted, beta)


def test_zero_event_stratum_warns_and_contributes_nothing(rng):
    ds = random_dataset(rng, n=6, p=2, K=1)
    ds = replace(ds, events=np.zeros_like(ds.events))
    with pytest.warns(UserWarning, match="no events"):
        assert cox_neg_log_partial_likelihood(ds, [np.ones(2)]) == 0.0
    assert np.array_equal(smooth_gradient(ds, [np.ones(2)], np.zeros((6, 6)), 0.0, [1.0])[0], np.zeros(2))


def test_stable_for_extreme_linear_predictors():
    ds = one_transition([[-400.0], [0.0], [400.0]], [1.0, 2.0, 3.0], [1, 1, 1])
    beta = [np.array([3.0])]
    val = cox_neg_log_partial_likelihood(ds, beta)
    assert np.isfinite(val)
    g = smooth_gradient(ds, beta, np.zeros((3, 3)), 0.0, [1.0])[0]
    assert np.all(np.isfinite(g))


def _fd_gradient(f, beta, h=1e-5):
    out = []
    for k, b in enumerate(beta):
        g = np.zeros_like(b)
        for p in range(len(b)):
            up = [x.copy() for x in beta]
            dn = [x.copy() for x in beta]
            up[k][p] += h
            dn[k][p] -= h
            g[p] = (f(up) - f(dn)) / (2 * h)
        out.append(g)
    return out


def test_gradient_symmetric_two_patient():
    ds = one_transition([[1.0, -1.0], [-1.0, 1.0]], [1.0, 2.0], [1, 1])
    g = smooth_gradient(ds, [np.zeros(2)], np.zeros((2, 2)), 0.0, [1.0])[0]
    # first event: x_1 - mean(x_1, x_2) = (1, -1); second: x_2 - x_2 = 0
    assert np.allclose(g, -(np.array([1.0, -1.0]) - 0.0))
    fd = _fd_gradient(lambda b: smooth_objective(ds, b, np.zeros((2, 2)), 0.0, [1.0]), [np.zeros(2)])[0]
    assert np.allclose(g, fd, atol=1e-8)


def test_identical_neighbours_have_no_penalty_gradient(rng):
    ds = random_dataset(rng, n=6, p=2, K=1)
    X = ds.X.copy()
    X[1] = X[0]
    ds = replace(ds, X=X)
    S = np.zeros((6, 6))
    S[0, 1] = S[1, 0] = 1.0
    beta = random_beta(rng, ds)
    with_pen = smooth_gradient(ds, beta, S, 3.0, [2.0])[0]
    without = smooth_gradient(ds, beta, S, 0.0, [2.0])[0]
    assert np.allclose(with_pen, without, atol=1e-14)


@given(st.integers(0, 100_000))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    n, p, K = int(rng.integers(3, 11)), int(rng.integers(1, 5)), int(rng.integers(1, 4))
    ds = random_dataset(rng, n=n, p=p, K=K, subsets=True)
    beta = random_beta(rng, ds)
    S = random_row_stochastic(rng, n)
    gamma, w = float(rng.uniform(0, 2)), rng.uniform(0.1, 3, size=K)
    g = smooth_gradient(ds, beta, S, gamma, w)
    fd = _fd_gradient(lambda b: smooth_objective(ds, b, S, gamma, w), beta)
    for a, b in zip(g, fd):
        assert np.linalg.norm(a - b) <= 1e-5 * max(1.0, np.linalg.norm(b))


def test_penalty_equals_pairwise_sum(rng):
    ds = random_dataset(rng, n=7, p=3, K=2)
    beta = random_beta(rng, ds)
    S = random_row_stochastic(rng, 7)
    pen = smooth_objective(ds, beta, S, 1.0, [1.0, 2.0]) - smooth_objective(ds, beta, S, 0.0, [1.0, 2.0])
    direct = sum(
        w * S[i, j] * ((ds.Xk(k)[i] - ds.Xk(k)[j]) @ beta[k]) ** 2
        for k, w in enumerate([1.0, 2.0]) for i in range(7) for j in range(7)
    )
    assert pen == pytest.approx(direct, rel=1e-12)


@pytest.mark.parametrize("v, t, expected", [(1.5, 0.5, 1.0), (0.3, 0.5, 0.0), (-2.0, 0.5, -1.5)])
def test_soft_threshold_examples(v, t, expected):
    assert soft_threshold(np.array([v]), t)[0] == pytest.approx(expected)


def test_soft_threshold_rejects_negative():
    with pytest.raises(ValidationError):
        soft_threshold(np.ones(2), -1.0)


def _hp(**kw):
    return Hyperparams(**{"gamma": 0.0, "eta": 0.0, "inner_tol": 1e-12, "max_inner": 5000, **kw})


def newton_mle(ds, iters=50):
    """Unpenalized stratified Cox MLE by Newton's method with loop formulas."""
    out = []
    for k in range(ds.K):
        X = ds.Xk(k)
        b = np.zeros(X.shape[1])
        for _ in range(iters):
            g = np.zeros_like(b)
            H = np.zeros((len(b), len(b)))
            for i in range(ds.n):
                if not ds.events[i, k]:
                    continue
                R = [j for j in range(ds.n) if ds.at_risk[j, k] and ds.times[j, k] >= ds.times[i, k]]
                w = np.exp(X[R] @ b)
                w = w / w.sum()
                m = w @ X[R]
                g -= X[i] - m
                H += (X[R] * w[:, None]).T @ X[R] - np.outer(m, m)
            b = b - np.linalg.solve(H, g)
        out.append(b)
    return out


def test_prox_converges_to_newton_mle():
    rng = np.random.default_rng(3)
    ds = random_dataset(rng, n=40, p=2, K=2, censor=0.2)
    got = prox_gradient_update(ds, zero_beta(ds), np.zeros((40, 40)), _hp(), np.ones(2))
    for a, b in zip(got, newton_mle(ds)):
        assert np.allclose(a, b, atol=1e-5)


def test_huge_eta_gives_exact_zero(rng):
    ds = random_dataset(rng, n=20, p=3, K=2)
    got = prox_gradient_update(ds, random_beta(rng, ds), np.zeros((20, 20)), _hp(eta=1e6), np.ones(2))
    assert all(np.all(b == 0) for b in got)


@given(st.integers(0, 100_000))
def test_prox_update_is_monotone(seed):
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, n=10, p=3, K=2)
    S = random_row_stochastic(rng, 10)
    hp = _hp(eta=float(rng.uniform(0, 2)), gamma=float(rng.uniform(0, 1)), max_inner=int(rng.integers(1, 50)))
    w = rng.uniform(0.5, 2, size=2)
    beta = random_beta(rng, ds) if rng.uniform() < 0.5 else zero_beta(ds)
    before = step1_objective(ds, beta, S, hp, w)
    after = step1_objective(ds, prox_gradient_update(ds, beta, S, hp, w), S, hp, w)
    assert after <= before + 1e-12 * max(1.0, abs(before))


def test_shrinkage_along_eta_grid():
    rng = np.random.default_rng(11)
    ds = random_dataset(rng, n=40, p=4, K=2, censor=0.2)
    norms = []
    for eta in [0.0, 0.1, 0.5, 1.0, 2.0, 5.0, 20.0]:
        b = prox_gradient_update(ds, zero_beta(ds), np.zeros((40, 40)), _hp(eta=eta), np.ones(2))
        norms.append(sum(np.abs(x).sum() for x in b))
    assert all(a >= b - 1e-8 for a, b in zip(norms, norms[1:]))


def test_weights_hand_computed_scalar():
    # two events: at t=1 risk set {x=0, 1, 2}; at t=2 risk set {1, 2}; beta = 0
    ds = one_transition([0.0, 1.0, 2.0], [1.0, 2.0, 3.0], [1, 1, 0])
    info = np.var([0.0, 1.0, 2.0]) + np.var([1.0, 2.0])
    w = estimate_weights(ds, [np.zeros(1)])
    assert w[0] == pytest.approx(info + 1e-8, rel=1e-12)


def test_weights_double_when_data_duplicated(rng):
    ds = random_dataset(rng, n=30, p=2, K=1, censor=0.2)
    dup = MultiStateDataset(
        ds.spec, [f"{p}{s}" for s in "ab" for p in ds.patient_ids], np.vstack([ds.X, ds.X]), ds.feature_names,
        ds.feature_index, np.vstack([ds.times, ds.times]), np.vstack([ds.events, ds.events]),
    )
    beta = random_beta(rng, ds, scale=0.2)
    assert estimate_weights(dup, beta)[0] == pytest.approx(2 * estimate_weights(ds, beta)[0], rel=1e-6)


def test_few_events_get_smaller_weight():
    rng = np.random.default_rng(5)
    ds = random_dataset(rng, n=60, p=2, K=2, censor=0.1)
    ev = ds.events.copy()
    keep = np.flatnonzero(ev[:, 1])[:6]
    ev[:, 1] = 0
    ev[keep, 1] = 1
    sparse = replace(ds, events=ev)
    w = estimate_weights(sparse, zero_beta(sparse))
    assert w[1] < w[0]


def test_zero_event_weight_is_floored(rng):
    ds = random_dataset(rng, n=10, p=2, K=2)
    ev = ds.events.copy()
    ev[:, 1] = 0
    ds = replace(ds, events=ev)
    assert estimate_weights(ds, zero_beta(ds))[1] == 1e-6


def test_hessian_matches_finite_differences(rng):
    ds = random_dataset(rng, n=10, p=3, K=1, ties=True)
    s = strata(ds)[0]
    b = rng.normal(scale=0.3, size=3)
    H = s.hessian(b)
    h = 1e-6
    fd = np.column_stack([(s.loss_grad(b + h * e)[1] - s.loss_grad(b - h * e)[1]) / (2 * h) for e in np.eye(3)])
    assert np.allclose(H, fd, rtol=1e-5, atol=1e-7)
