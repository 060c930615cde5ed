import csv
import itertools
from math import comb, log

import numpy as np
import pytest
from hypothesis import given, strategies as st

from trajclust import evaluation as ev
from trajclust.errors import UndefinedMetricError, ValidationError

from conftest import random_beta, random_dataset


# ---------------------------------------------------------------- oracles

def brute_c_index(risk, t, e):
    num = den = 0.0
    for i, j in itertools.permutations(range(len(t)), 2):
        if e[i] and t[i] < t[j]:
            den += 1
            num += 1.0 if risk[i] > risk[j] else 0.5 if risk[i] == risk[j] else 0.0
    return num / den


def brute_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    return sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg) / (len(pos) * len(neg))


def pair_count_ari(a, b):
    ss = sd = ds_ = dd = 0
    for i, j in itertools.combinations(range(len(a)), 2):
        sa, sb = a[i] == a[j], b[i] == b[j]
        ss += sa and sb
        sd += sa and not sb
        ds_ += sb and not sa
        dd += not sa and not sb
    return 2.0 * (ss * dd - sd * ds_) / ((ss + sd) * (sd + dd) + (ss + ds_) * (ds_ + dd))


def triple_sum_emi(a_sizes, b_sizes, N):
    total = 0.0
    for ai in a_sizes:
        for bj in b_sizes:
            for nij in range(max(1, ai + bj - N), min(ai, bj) + 1):
                p = comb(bj, nij) * comb(N - bj, ai - nij) / comb(N, ai)
                total += nij / N * log(N * nij / (ai * bj)) * p
    return total


def entropy(sizes, N):
    return -sum(s / N * log(s / N) for s in sizes if s)


def mi(a, b):
    N = len(a)
    total = 0.0
    for x in set(a):
        for y in set(b):
            nxy = sum(1 for i in range(N) if a[i] == x and b[i] == y)
            if nxy:
                nx, ny = a.count(x), b.count(y)
                total += nxy / N * log(N * nxy / (nx * ny))
    return total


# ---------------------------------------------------------------- C-index / AUROC

def test_c_index_examples():
    t = np.array([1.0, 2, 3, 4])
    assert ev.c_index(-t, t, np.ones(4)) == 1.0
    assert ev.c_index(np.zeros(4), t, np.ones(4)) == 0.5
    t5 = np.array([2.0, 5, 1, 4, 3])
    e5 = np.array([1, 1, 0, 1, 1])
    r5 = np.array([0.3, -0.2, 0.9, 0.1, 0.3])
    assert ev.c_index(r5, t5, e5) == pytest.approx(brute_c_index(r5, t5, e5), abs=1e-12)
    with pytest.raises(UndefinedMetricError):
        ev.c_index([1, 2], [1, 2], [0, 0])


@given(st.integers(0, 100_000))
def test_c_index_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 15))
    t = rng.integers(1, 6, size=n).astype(float)
    e = rng.uniform(size=n) < 0.7
    e[np.argmin(t)] = True
    if np.all(t == t.min()):
        t[0] += 1
    r = rng.integers(0, 4, size=n).astype(float)
    try:
        ref = brute_c_index(r, t, e)
    except ZeroDivisionError:
        return
    assert ev.c_index(r, t, e) == pytest.approx(ref, abs=1e-12)


@given(st.integers(0, 100_000))
def test_c_index_complement(seed):
    rng = np.random.default_rng(seed)
    t = rng.permutation(10).astype(float) + 1
    e = np.ones(10)
    r = rng.normal(size=10)
    assert ev.c_index(r, t, e) + ev.c_index(-r, t, e) == pytest.approx(1.0, abs=1e-12)


def test_auroc_matches_mann_whitney(rng):
    import scipy.stats
    s = rng.integers(0, 5, size=20).astype(float)
    y = rng.uniform(size=20) < 0.4
    assert ev.auroc(s, y) == pytest.approx(brute_auc(s, y), abs=1e-12)
    u = scipy.stats.mannwhitneyu(s[y], s[~y]).statistic
    assert ev.auroc(s, y) == pytest.approx(u / (y.sum() * (~y).sum()), abs=1e-12)
    with pytest.raises(UndefinedMetricError):
        ev.auroc([1, 2], [1, 1])


def test_td_auroc_examples(rng):
    t = np.arange(1.0, 11)
    assert ev.time_dependent_auroc(-t, t, np.ones(10)) == 1.0
    n = 4000
    tt = rng.exponential(size=n)
    assert abs(ev.time_dependent_auroc(rng.normal(size=n), tt, np.ones(n)) - 0.5) < 0.05
    t6 = np.array([1.0, 2, 3, 4, 5, 6])
    e6 = np.array([1, 0, 1, 1, 0, 1])
    r6 = np.array([0.5, 0.9, 0.1, 0.7, 0.2, 0.3])
    cases = (t6 <= 3.5) & (e6 == 1)
    controls = t6 > 3.5
    keep = cases | controls
    ref = brute_auc(r6[keep], cases[keep])
    assert ev.time_dependent_auroc(r6, t6, e6, [3.5]) == pytest.approx(ref, abs=1e-12)
    with pytest.raises(UndefinedMetricError):
        ev.time_dependent_auroc(r6, t6, e6, [100.0])


# ---------------------------------------------------------------- ARI / AMI

def test_ari_examples():
    a = [0, 0, 1, 1, 2, 2, 2, 0]
    assert ev.adjusted_rand_index(a, a) == 1.0
    assert ev.adjusted_rand_index(np.zeros(8), np.arange(8)) == 0.0
    b = [1, 1, 0, 2, 2, 0, 1, 1]
    assert ev.adjusted_rand_index(a, b) == pytest.approx(pair_count_ari(a, b), abs=1e-12)
    with pytest.raises(ValidationError):
        ev.adjusted_rand_index([0], [0])


def test_ami_examples():
    a = [0, 0, 0, 1, 1, 2, 2, 2, 2]
    b = [1, 1, 0, 0, 0, 0, 2, 2, 1]
    assert ev.adjusted_mutual_information(a, a) == pytest.approx(1.0)
    N = len(a)
    sa = [a.count(x) for x in sorted(set(a))]
    sb = [b.count(x) for x in sorted(set(b))]
    emi = triple_sum_emi(sa, sb, N)
    assert ev.expected_mutual_information(ev.contingency(a, b)) == pytest.approx(emi, abs=1e-12)
    ref = (mi(a, b) - emi) / (max(entropy(sa, N), entropy(sb, N)) - emi)
    assert ev.adjusted_mutual_information(a, b) == pytest.approx(ref, abs=1e-10)
    rng = np.random.default_rng(0)
    x, y = rng.integers(0, 4, 3000), rng.integers(0, 4, 3000)
    assert abs(ev.adjusted_mutual_information(x, y)) < 0.05


@given(st.integers(0, 100_000))
def test_partition_scores_symmetric_and_relabel_invariant(seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 3, 12)
    b = rng.integers(0, 4, 12)
    perm = rng.permutation(4)
    for f in (ev.adjusted_rand_index, ev.adjusted_mutual_information):
        v = f(a, b)
        assert f(b, a) == pytest.approx(v, abs=1e-12)
        assert f(a, perm[b]) == pytest.approx(v, abs=1e-12)
        assert f(a, b) <= 1 + 1e-12


# ---------------------------------------------------------------- graph / sparsity

def test_edge_auc_examples(rng):
    labels = np.array([0, 0, 0, 1, 1, 1])
    mask = np.equal.outer(labels, labels)
    assert ev.edge_auc(mask.astype(float), within_mask=mask) == 1.0
    assert ev.edge_auc(np.ones((6, 6)), within_mask=mask) == 0.5
    S = rng.uniform(size=(6, 6))
    off = ~np.eye(6, dtype=bool)
    assert ev.edge_auc(S, within_mask=mask) == pytest.approx(brute_auc(S[off], mask[off]), abs=1e-12)
    assert ev.edge_auc(np.exp(3 * S) - 7, within_mask=mask) == ev.edge_auc(S, within_mask=mask)
    with pytest.raises(UndefinedMetricError):
        ev.edge_auc(S, within_mask=np.ones((6, 6)))


def test_sparsity_examples():
    assert ev.sparsity_ratio([np.zeros(4)]).tolist() == [0.0]
    assert ev.sparsity_ratio([np.ones(3)]).tolist() == [1.0]
    assert ev.sparsity_ratio([np.array([1e-12, 0.3])]).tolist() == [0.5]


# ---------------------------------------------------------------- KM / log-rank

def test_km_examples():
    km = ev.kaplan_meier([1, 2, 3], [1, 1, 1])
    assert km(np.array([1, 2, 3])) == pytest.approx([2 / 3, 1 / 3, 0])
    assert km(0.5) == 1.0 and km(1.5) == pytest.approx(2 / 3)
    assert np.all(ev.kaplan_meier([1, 2, 5], [0, 0, 0]).survival == 1)
    km6 = ev.kaplan_meier([1, 2, 2, 3, 4, 5], [1, 1, 0, 1, 0, 1])
    assert km6([1, 2, 3, 4, 5]) == pytest.approx([5 / 6, 2 / 3, 4 / 9, 4 / 9, 0], abs=1e-12)
    assert km6.at_risk.tolist() == [6, 6, 5, 3, 2, 1]
    assert np.allclose(km6.transition_probability, 1 - km6.survival)


@given(st.integers(0, 100_000))
def test_km_without_censoring_is_empirical(seed):
    rng = np.random.default_rng(seed)
    t = rng.integers(1, 8, size=15).astype(float)
    km = ev.kaplan_meier(t, np.ones(15))
    grid = np.linspace(0, 9, 40)
    assert np.allclose(km(grid), [(t > g).mean() for g in grid], atol=1e-12)
    assert np.all(np.diff(km.survival) <= 0)


def test_logrank_hand_fixture():
    # group A: 1, 3 (events); group B: 2 (event), 4 (censored)
    res = ev.logrank_test([1, 3, 2, 4], [1, 1, 1, 0], ["A", "A", "B", "B"])
    # O_A - E_A = 2 - 4/3; V = 1/4 + 2/9 + 1/4
    assert res.chi2 == pytest.approx((2 / 3) ** 2 / (13 / 18), abs=1e-12)
    assert res.df == 1


def test_logrank_oe_oracle(rng):
    t = rng.integers(1, 10, size=30).astype(float)
    e = rng.uniform(size=30) < 0.7
    g = rng.integers(0, 2, size=30)
    O = E = V = 0.0
    for u in sorted(set(t[e])):
        at = t >= u
        n, n1 = at.sum(), (at & (g == 0)).sum()
        d = (e & (t == u)).sum()
        d1 = (e & (t == u) & (g == 0)).sum()
        O += d1
        E += d * n1 / n
        if n > 1:
            V += d * (n1 / n) * (1 - n1 / n) * (n - d) / (n - 1)
    assert ev.logrank_test(t, e, g).chi2 == pytest.approx((O - E) ** 2 / V, rel=1e-10)


def test_logrank_properties(rng):
    t = rng.exponential(size=40)
    e = rng.uniform(size=40) < 0.8
    dup = ev.logrank_test(np.r_[t, t], np.r_[e, e], np.r_[np.zeros(40), np.ones(40)])
    assert dup.chi2 == pytest.approx(0, abs=1e-10) and dup.p == pytest.approx(1.0)
    g = (rng.uniform(size=40) < 0.5).astype(int)
    t = t * np.where(g == 1, 3.0, 1.0)
    one = ev.logrank_test(t, e, g)
    two = ev.logrank_test(np.r_[t, t], np.r_[e, e], np.r_[g, g])
    assert two.chi2 == pytest.approx(2 * one.chi2, rel=0.1)
    assert ev.logrank_test(t, e, rng.integers(0, 3, 40)).df == 2
    with pytest.raises(ValidationError):
        ev.logrank_test(t, e, np.zeros(40))
    assert 0 <= one.p <= 1 and one.chi2 >= 0


# ---------------------------------------------------------------- audit

def test_audit_separable_feature(rng):
    X = rng.normal(size=(120, 5))
    labels = (X[:, 2] > 0).astype(int)
    res = ev.cluster_feature_audit(X, labels)
    for r in res:
        assert r.auc >= 0.95 and "x2" in r.significant_features


def test_audit_null_and_constant(rng):
    X = rng.normal(size=(150, 6))
    X[:, 4] = 1.0
    labels = rng.integers(0, 2, 150)
    res = ev.cluster_feature_audit(X, labels, correction="bonferroni")
    for r in res:
        assert abs(r.auc - 0.5) <= 0.1
        assert r.significant_features == []
        assert "x4" not in r.p_values


# ---------------------------------------------------------------- reports

def test_evaluate_and_files(rng, tmp_path):
    ds = random_dataset(rng, n=30, K=2)
    beta = random_beta(rng, ds)
    labels = rng.integers(0, 2, 30)
    rep = ev.evaluate(ds, beta, labels, rng.uniform(size=(30, 30)), labels)
    d = rep.as_dict()
    assert d["ari"] == 1.0 and 0 <= d["edge_auc"] <= 1
    assert len(rep.c_index) == 2 and all(0 <= c <= 1 for c in rep.c_index)
    ev.write_metrics(d, tmp_path / "m.txt")
    back = ev.read_metrics(tmp_path / "m.txt")
    assert float(back["c_index"]) == d["c_index"]
    km = ev.kaplan_meier(ds.times[:, 0], ds.events[:, 0], group=1)
    ev.write_curves([(0, km)], tmp_path / "c.csv", probability=True)
    rows = list(csv.DictReader(open(tmp_path / "c.csv")))
    assert rows[0]["transition_id"] == "1" and float(rows[0]["probability"]) == 0.0
