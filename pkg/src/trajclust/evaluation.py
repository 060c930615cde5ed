"""Survival, clustering and graph-recovery metrics."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy import stats
from scipy.special import gammaln

from .errors import UndefinedMetricError, ValidationError


# ---------------------------------------------------------------------------
# discrimination
# ---------------------------------------------------------------------------

def auroc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney statistic (ties = 1/2)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n1 = int(labels.sum())
    n0 = labels.size - n1
    if n1 == 0 or n0 == 0:
        raise UndefinedMetricError("AUROC needs both positive and negative labels")
    ranks = stats.rankdata(scores)
    u = ranks[labels].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def c_index(risk_scores, times, events) -> float:
    """Harrell's concordance index.

    A pair is comparable when the patient with the shorter time has an event.
    It is concordant when that patient also has the higher risk; ties in risk
    count one half.
    """
    risk = np.asarray(risk_scores, dtype=float)
    t = np.asarray(times, dtype=float)
    e = np.asarray(events).astype(bool)
    order = np.argsort(t, kind="stable")
    risk, t, e = risk[order], t[order], e[order]
    concordant = 0.0
    comparable = 0
    # for each event, compare with all patients with a strictly later time
    later_start = np.searchsorted(t, t, side="right")
    for i in np.flatnonzero(e):
        others = risk[later_start[i]:]
        if others.size == 0:
            continue
        comparable += others.size
        concordant += np.count_nonzero(risk[i] > others) + 0.5 * np.count_nonzero(risk[i] == others)
    if comparable == 0:
        raise UndefinedMetricError("no comparable pairs for the C-index")
    return float(concordant / comparable)


def _deciles(times, events):
    ev = np.asarray(times)[np.asarray(events).astype(bool)]
    if ev.size == 0:
        raise UndefinedMetricError("no events to place evaluation times")
    return np.quantile(ev, np.linspace(0.1, 0.9, 9))


def time_dependent_auroc(risk_scores, times, events, eval_times=None) -> float:
    """Cumulative/dynamic AUROC averaged over evaluation times (no IPCW).

    At time ``t`` the cases are patients with an event by ``t`` and the
    controls are patients still event-free after ``t``.
    """
    risk = np.asarray(risk_scores, dtype=float)
    t = np.asarray(times, dtype=float)
    e = np.asarray(events).astype(bool)
    if eval_times is None:
        eval_times = _deciles(t, e)
    vals = []
    for tau in np.atleast_1d(eval_times):
        cases = e & (t <= tau)
        controls = t > tau
        if cases.any() and controls.any():
            keep = cases | controls
            vals.append(auroc(risk[keep], cases[keep]))
    if not vals:
        raise UndefinedMetricError("no evaluation time has both cases and controls")
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# partition agreement
# ---------------------------------------------------------------------------

def contingency(a, b) -> np.ndarray:
    _, ia = np.unique(np.asarray(a), return_inverse=True)
    _, ib = np.unique(np.asarray(b), return_inverse=True)
    M = np.zeros((ia.max() + 1, ib.max() + 1), dtype=np.int64)
    np.add.at(M, (ia, ib), 1)
    return M


def _comb2(x):
    x = np.asarray(x, dtype=float)
    return x * (x - 1) / 2.0


def adjusted_rand_index(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape or a.size < 2:
        raise ValidationError("label vectors must have equal length >= 2")
    M = contingency(a, b)
    sum_ij = _comb2(M).sum()
    sa = _comb2(M.sum(axis=1)).sum()
    sb = _comb2(M.sum(axis=0)).sum()
    total = _comb2(a.size)
    expected = sa * sb / total
    max_index = 0.5 * (sa + sb)
    if max_index == expected:
        # both partitions trivial in the same way (all one cluster or all singletons)
        return 1.0 if sa == sb else 0.0
    return float((sum_ij - expected) / (max_index - expected))


def adjusted_mutual_information(a, b) -> float:
    """AMI with hypergeometric expected MI and ``max(H(a), H(b))`` normalisation."""
    from sklearn.metrics import adjusted_mutual_info_score

    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape or a.size < 2:
        raise ValidationError("label vectors must have equal length >= 2")
    return float(adjusted_mutual_info_score(a, b, average_method="max"))


def expected_mutual_information(M: np.ndarray) -> float:
    """Exact expected MI of two partitions under the permutation model."""
    a = M.sum(axis=1)
    b = M.sum(axis=0)
    N = int(M.sum())
    emi = 0.0
    for ai in a:
        for bj in b:
            lo = max(1, ai + bj - N)
            for nij in range(lo, min(ai, bj) + 1):
                logp = (
                    gammaln(ai + 1) + gammaln(bj + 1) + gammaln(N - ai + 1) + gammaln(N - bj + 1)
                    - gammaln(N + 1) - gammaln(nij + 1) - gammaln(ai - nij + 1)
                    - gammaln(bj - nij + 1) - gammaln(N - ai - bj + nij + 1)
                )
                emi += nij / N * np.log(N * nij / (ai * bj)) * np.exp(logp)
    return float(emi)


# ---------------------------------------------------------------------------
# graph recovery / model characteristics
# ---------------------------------------------------------------------------

def edge_auc(S_learned, S_star=None, within_mask=None) -> float:
    """AUROC of learned off-diagonal similarities for predicting same-cluster pairs.

    Labels come from ``within_mask``. When only ``S_star`` is given, a pair is
    labelled positive if its ground-truth affinity exceeds the uniform level
    ``1/(n-1)``.
    """
    S = np.asarray(S_learned, dtype=float)
    n = S.shape[0]
    off = ~np.eye(n, dtype=bool)
    if within_mask is None:
        if S_star is None:
            raise ValidationError("edge_auc needs within_mask or S_star")
        within_mask = np.asarray(S_star) > 1.0 / (n - 1)
    mask = np.asarray(within_mask).astype(bool)
    if mask.shape != S.shape:
        raise ValidationError("within_mask must match S in shape")
    return auroc(S[off], mask[off])


def similarity_gap(S, labels) -> float:
    """Mean within-cluster minus mean between-cluster off-diagonal similarity."""
    S = np.asarray(S, dtype=float)
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(labels), dtype=bool)
    within = S[same & off]
    between = S[~same]
    if within.size == 0 or between.size == 0:
        raise UndefinedMetricError("similarity gap needs both within- and between-cluster pairs")
    return float(within.mean() - between.mean())


def sparsity_ratio(beta, zero_tol: float = 1e-8) -> np.ndarray:
    """Fraction of coefficients with ``|b| > zero_tol``, per transition."""
    if zero_tol < 0:
        raise ValidationError("zero_tol must be nonnegative")
    return np.array([np.mean(np.abs(np.asarray(b)) > zero_tol) if len(b) else 0.0 for b in beta])


# ---------------------------------------------------------------------------
# Kaplan-Meier and log-rank
# ---------------------------------------------------------------------------

@dataclass
class SurvivalCurve:
    """Right-continuous product-limit step function.

    ``survival[m]`` holds on ``[times[m], times[m+1])``; ``times[0] = 0``.
    """

    times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray
    group: object = None

    def __call__(self, t) -> np.ndarray:
        idx = np.searchsorted(self.times, np.asarray(t, dtype=float), side="right") - 1
        return self.survival[np.clip(idx, 0, None)]

    @property
    def transition_probability(self) -> np.ndarray:
        """``1 - S(t)``: probability of having made the transition by ``t``."""
        return 1.0 - self.survival


def kaplan_meier(times, events, group=None) -> SurvivalCurve:
    t = np.asarray(times, dtype=float)
    e = np.asarray(events).astype(bool)
    if t.size == 0:
        raise ValidationError("Kaplan-Meier needs at least one observation")
    grid = np.unique(t)
    n_at = np.array([np.count_nonzero(t >= u) for u in grid])
    d = np.array([np.count_nonzero((t == u) & e) for u in grid])
    surv = np.cumprod(1.0 - d / n_at)
    if grid[0] > 0:
        grid = np.concatenate([[0.0], grid])
        surv = np.concatenate([[1.0], surv])
        n_at = np.concatenate([[t.size], n_at])
        d = np.concatenate([[0], d])
    return SurvivalCurve(grid, surv, n_at, d, group)


class LogRankResult(NamedTuple):
    chi2: float
    df: int
    p: float


def logrank_test(times, events, groups) -> LogRankResult:
    """K-sample log-rank test."""
    t = np.asarray(times, dtype=float)
    e = np.asarray(events).astype(bool)
    g = np.asarray(groups)
    levels = np.unique(g)
    G = len(levels)
    if G < 2:
        raise ValidationError("log-rank test needs at least two groups")
    if not e.any():
        raise ValidationError("log-rank test needs at least one event")
    gi = np.searchsorted(levels, g)
    O = np.zeros(G)
    E = np.zeros(G)
    V = np.zeros((G, G))
    for u in np.unique(t[e]):
        risk = t >= u
        n_g = np.bincount(gi[risk], minlength=G).astype(float)
        d_g = np.bincount(gi[risk & e & (t == u)], minlength=G).astype(float)
        n_tot, d_tot = n_g.sum(), d_g.sum()
        O += d_g
        E += d_tot * n_g / n_tot
        if n_tot > 1:
            frac = n_g / n_tot
            V += d_tot * (n_tot - d_tot) / (n_tot - 1) * (np.diag(frac) - np.outer(frac, frac))
    diff = (O - E)[:-1]
    Vr = V[:-1, :-1]
    chi2 = float(diff @ np.linalg.pinv(Vr) @ diff)
    chi2 = max(chi2, 0.0)
    df = G - 1
    return LogRankResult(chi2, df, float(stats.chi2.sf(chi2, df)))


# ---------------------------------------------------------------------------
# feature audit
# ---------------------------------------------------------------------------

class AuditResult(NamedTuple):
    cluster: int
    auc: float
    significant_features: list
    p_values: dict


def cluster_feature_audit(
    ds, labels, folds: int = 5, alpha: float = 0.05, correction: str = "none", seed: int = 0
) -> list[AuditResult]:
    """One-vs-rest L1-logistic classification of each cluster.

    The L1 strength is chosen inside each training fold by cross-validated
    AUC; the reported AUC is computed on pooled out-of-fold predictions.
    Features are flagged significant by Welch t-tests on standardized
    covariates (``correction`` may be ``"bonferroni"``). Constant covariates
    are excluded.
    """
    from sklearn.linear_model import LogisticRegressionCV
    from sklearn.model_selection import StratifiedKFold

    X = ds.X if hasattr(ds, "X") else np.asarray(ds, dtype=float)
    names = list(ds.feature_names) if hasattr(ds, "feature_names") else [f"x{j}" for j in range(X.shape[1])]
    labels = np.asarray(labels)
    sd = X.std(axis=0, ddof=1)
    keep = np.flatnonzero(sd > 1e-12)
    X = (X[:, keep] - X[:, keep].mean(axis=0)) / sd[keep]
    names = [names[j] for j in keep]
    results = []
    for c in np.unique(labels):
        y = (labels == c).astype(int)
        n_min = int(min(y.sum(), (1 - y).sum()))
        k_outer = min(folds, n_min)
        if k_outer < 2:
            raise ValidationError(f"cluster {c}: too few members for stratified folds")
        outer = StratifiedKFold(k_outer, shuffle=True, random_state=seed)
        scores = np.empty(len(y))
        for tr, te in outer.split(X, y):
            k_inner = min(folds, int(min(y[tr].sum(), (1 - y[tr]).sum())))
            if k_inner < 2:
                raise ValidationError(f"cluster {c}: a training fold lacks one class")
            model = LogisticRegressionCV(
                Cs=10,
                penalty="l1",
                solver="liblinear",
                scoring="roc_auc",
                cv=StratifiedKFold(k_inner, shuffle=True, random_state=seed),
                max_iter=1000,
            ).fit(X[tr], y[tr])
            scores[te] = model.decision_function(X[te])
        auc = auroc(scores, y)
        pvals = {}
        for j, nm in enumerate(names):
            pvals[nm] = float(stats.ttest_ind(X[y == 1, j], X[y == 0, j], equal_var=False).pvalue)
        level = alpha / len(names) if correction == "bonferroni" else alpha
        sig = [nm for nm in names if pvals[nm] <= level]
        results.append(AuditResult(int(c), auc, sig, pvals))
    return results


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class EvaluationReport:
    c_index: list[float] = field(default_factory=list)
    td_auroc: list[float] = field(default_factory=list)
    ari: float = float("nan")
    ami: float = float("nan")
    sparsity_ratio: list[float] = field(default_factory=list)
    edge_auc: float = float("nan")
    logrank: LogRankResult | None = None
    runtime_s: float = float("nan")
    peak_mem_mb: float = float("nan")

    @property
    def mean_c_index(self) -> float:
        vals = [v for v in self.c_index if np.isfinite(v)]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def mean_td_auroc(self) -> float:
        vals = [v for v in self.td_auroc if np.isfinite(v)]
        return float(np.mean(vals)) if vals else float("nan")

    def as_dict(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for k, v in enumerate(self.c_index):
            out[f"c_index_t{k + 1}"] = v
        out["c_index"] = self.mean_c_index
        for k, v in enumerate(self.td_auroc):
            out[f"td_auroc_t{k + 1}"] = v
        out["td_auroc"] = self.mean_td_auroc
        out["ari"] = self.ari
        out["ami"] = self.ami
        for k, v in enumerate(self.sparsity_ratio):
            out[f"sparsity_t{k + 1}"] = v
        out["sparsity"] = float(np.mean(self.sparsity_ratio)) if self.sparsity_ratio else float("nan")
        out["edge_auc"] = self.edge_auc
        if self.logrank is not None:
            out["logrank_chi2"] = self.logrank.chi2
            out["logrank_df"] = self.logrank.df
            out["logrank_p"] = self.logrank.p
        out["runtime_s"] = self.runtime_s
        out["peak_mem_mb"] = self.peak_mem_mb
        return out


def _safe(fn, *args, **kw) -> float:
    try:
        return fn(*args, **kw)
    except UndefinedMetricError:
        return float("nan")


def transition_risk(ds, beta, k: int) -> np.ndarray:
    return ds.Xk(k) @ np.asarray(beta[k], dtype=float)


def survival_metrics(ds, beta) -> tuple[list[float], list[float]]:
    """Per-transition C-index and time-dependent AUROC on at-risk patients."""
    cis, aucs = [], []
    for k in range(ds.K):
        rows = ds.at_risk[:, k]
        risk = transition_risk(ds, beta, k)[rows]
        t, e = ds.times[rows, k], ds.events[rows, k]
        cis.append(_safe(c_index, risk, t, e))
        aucs.append(_safe(time_dependent_auroc, risk, t, e))
    return cis, aucs


def cluster_logrank(ds, labels, k: int) -> LogRankResult | None:
    rows = ds.at_risk[:, k]
    g = np.asarray(labels)[rows]
    if len(np.unique(g)) < 2 or not ds.events[rows, k].any():
        return None
    return logrank_test(ds.times[rows, k], ds.events[rows, k], g)


def evaluate(
    ds,
    beta,
    labels=None,
    S=None,
    true_labels=None,
    eval_ds=None,
    transition: int = 0,
    zero_tol: float = 1e-8,
) -> EvaluationReport:
    """Assemble an :class:`EvaluationReport`.

    Survival discrimination is measured on ``eval_ds`` when given (held-out
    patients), otherwise on ``ds``. Clustering and graph metrics use ``ds``.
    """
    target = eval_ds if eval_ds is not None else ds
    rep = EvaluationReport()
    rep.c_index, rep.td_auroc = survival_metrics(target, beta)
    rep.sparsity_ratio = sparsity_ratio(beta, zero_tol).tolist()
    if labels is not None:
        rep.logrank = cluster_logrank(ds, labels, transition)
        if true_labels is not None:
            rep.ari = adjusted_rand_index(true_labels, labels)
            rep.ami = adjusted_mutual_information(true_labels, labels)
    if S is not None and true_labels is not None:
        rep.edge_auc = _safe(edge_auc, S, None, np.equal.outer(true_labels, true_labels))
    return rep


def write_metrics(metrics: dict, path) -> None:
    """Flat ``key=value`` file, one metric per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in metrics.items():
            fh.write(f"{k}={v!r}\n" if isinstance(v, float) else f"{k}={v}\n")


def read_metrics(path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                k, _, v = line.partition("=")
                out[k.strip()] = v.strip()
    return out


def write_curves(curves: Sequence[tuple[int, SurvivalCurve]], path, probability: bool = False) -> None:
    """Per-curve CSV ``transition_id, group, time, survival|probability, at_risk``."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    col = "probability" if probability else "survival"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["transition_id", "group", "time", col, "at_risk"])
        for k, curve in curves:
            vals = curve.transition_probability if probability else curve.survival
            for t, s, r in zip(curve.times, vals, curve.at_risk):
                w.writerow([k + 1, curve.group, repr(float(t)), repr(float(s)), int(r)])
