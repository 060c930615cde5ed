"""Joint objective, alternating minimisation, grid search and baselines.

The full objective is

    Cox(beta) + eta sum_k ||beta_k||_1
      + gamma sum_ij S_ij (mu d_cov(i,j) + d_msm(i,j))
      + sum_i lambda_i ||S_i||^2 + alpha Tr(U'LU)

minimised block-wise over beta (proximal gradient), S (closed-form rows)
and U (smallest Laplacian eigenvectors). In adaptive mode ``lambda_i`` is
the per-row weight chosen by the kappa-neighbour rule.
"""
from __future__ import annotations

import csv
import dataclasses
import time
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import evaluation
from .dataset import MultiStateDataset
from .errors import DivergenceError, ValidationError
from .graph import (
    SimilarityMatrix,
    build_laplacian,
    covariate_distance,
    pairwise_distance,
    update_similarity,
)
from .spectral import ClusterAssignment, SpectralEmbedding, extract_clusters, smallest_eigs
from .survival import (
    check_beta,
    cox_neg_log_partial_likelihood,
    estimate_weights,
    prox_gradient_update,
    strata,
    zero_beta,
)

VARIANTS = ("full", "cox_only", "fixed_rbf_graph", "knn_graph")


@dataclass(frozen=True)
class Hyperparams:
    """Penalty weights and solver settings.

    Exactly one of ``kappa`` (adaptive neighbour mode) and ``lam`` (global
    quadratic weight) must be set. ``spectral_step2`` folds the spectral
    term into the similarity update; turning it off reproduces a Step 2
    that only sees the patient distances.
    """

    eta: float = 0.05
    gamma: float = 1e-5
    mu: float = 1000.0
    kappa: int | None = 10
    lam: float | None = None
    alpha_spec: float = 1e-2
    c: int = 4
    outer_tol: float = 1e-5
    max_outer: int = 50
    inner_tol: float = 1e-9
    max_inner: int = 1000
    spectral_step2: bool = True

    def __post_init__(self):
        for name in ("eta", "gamma", "mu", "alpha_spec"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValidationError(f"{name} must be finite and nonnegative, got {v}")
        if (self.kappa is None) == (self.lam is None):
            raise ValidationError("set exactly one of kappa (adaptive) or lam (global)")
        if self.kappa is not None and (int(self.kappa) != self.kappa or self.kappa < 1):
            raise ValidationError(f"kappa must be a positive integer, got {self.kappa}")
        if self.lam is not None and not self.lam > 0:
            raise ValidationError(f"lam must be positive, got {self.lam}")
        if self.outer_tol <= 0 or self.inner_tol <= 0:
            raise ValidationError("tolerances must be positive")
        if self.max_outer < 1 or self.max_inner < 1:
            raise ValidationError("iteration limits must be at least 1")

    @property
    def lambda_mode(self) -> tuple[str, float]:
        return ("adaptive", self.kappa) if self.kappa is not None else ("global", self.lam)

    def check(self, n: int) -> None:
        if self.kappa is not None and not 1 <= self.kappa <= n - 1:
            raise ValidationError(f"kappa must lie in [1, {n - 1}], got {self.kappa}")
        if not 2 <= self.c <= n - 1:
            raise ValidationError(f"c must lie in [2, {n - 1}], got {self.c}")

    def replace(self, **kw) -> "Hyperparams":
        if "kappa" in kw and kw["kappa"] is not None:
            kw.setdefault("lam", None)
        if "lam" in kw and kw["lam"] is not None:
            kw.setdefault("kappa", None)
        return dataclasses.replace(self, **kw)

    def label(self) -> str:
        mode = f"kappa={self.kappa}" if self.kappa is not None else f"lambda={self.lam:g}"
        return f"eta={self.eta:g},gamma={self.gamma:g},mu={self.mu:g},{mode},alpha={self.alpha_spec:g},c={self.c}"


@dataclass(frozen=True)
class FitResult:
    beta: list
    weights: np.ndarray
    S: SimilarityMatrix
    U: SpectralEmbedding | None
    clusters: ClusterAssignment | None
    objective_trace: list
    converged: bool
    iterations: int
    hp: Hyperparams
    variant: str = "full"
    step_log: list = field(default_factory=list)
    runtime_s: float = float("nan")

    @property
    def objective(self) -> float:
        return self.objective_trace[-1]

    @property
    def labels(self):
        return None if self.clusters is None else self.clusters.labels

    def nnz(self, zero_tol: float = 1e-8) -> int:
        return int(sum(np.count_nonzero(np.abs(b) > zero_tol) for b in self.beta))

    def summary(self) -> dict:
        return {
            "variant": self.variant,
            "objective": self.objective,
            "iterations": self.iterations,
            "converged": self.converged,
            "nnz": self.nnz(),
            "n_clusters": 0 if self.clusters is None else self.clusters.n_clusters,
            "cluster_method": "none" if self.clusters is None else self.clusters.method,
            "runtime_s": self.runtime_s,
        }


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------

def _row_lambda(S, hp: Hyperparams, n: int) -> np.ndarray:
    if isinstance(S, SimilarityMatrix):
        return S.row_lambda
    if hp.lam is not None:
        return np.full(n, float(hp.lam))
    raise ValidationError("adaptive mode needs a SimilarityMatrix carrying its row weights")


def objective_terms(ds, beta, weights, S, U, hp: Hyperparams, _strata=None, _d_cov=None) -> dict:
    """Each additive piece of the joint objective, plus their ``total``."""
    beta = check_beta(ds, beta)
    n = ds.n
    Sm = S.S if isinstance(S, SimilarityMatrix) else np.asarray(S, dtype=float)
    lam = _row_lambda(S, hp, n)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        cox = cox_neg_log_partial_likelihood(ds, beta, _strata)
    l1 = hp.eta * sum(float(np.abs(b).sum()) for b in beta)
    graph = 0.0
    if hp.gamma:
        dist = pairwise_distance(ds, beta, weights, hp.mu, _d_cov)
        graph = hp.gamma * float(np.sum(Sm * dist.d))
    quad = float(lam @ np.einsum("ij,ij->i", Sm, Sm))
    spec = 0.0
    if hp.alpha_spec and U is not None:
        Um = U.U if isinstance(U, SpectralEmbedding) else np.asarray(U, dtype=float)
        spec = hp.alpha_spec * float(np.einsum("ij,ij->", Um, build_laplacian(Sm).L @ Um))
    total = cox + l1 + graph + quad + spec
    return {"cox": cox, "l1": l1, "graph": graph, "quadratic": quad, "spectral": spec, "total": total}


def objective(ds, beta, weights, S, U, hp: Hyperparams, _strata=None, _d_cov=None) -> float:
    """Joint objective value; see :func:`objective_terms`."""
    return objective_terms(ds, beta, weights, S, U, hp, _strata, _d_cov)["total"]


# ---------------------------------------------------------------------------
# alternating minimisation
# ---------------------------------------------------------------------------

def _finite(v: float, where: str) -> float:
    if not np.isfinite(v):
        raise DivergenceError(f"objective became non-finite after {where}")
    return v


def fit(ds: MultiStateDataset, hp: Hyperparams, init: FitResult | None = None, seed: int = 0) -> FitResult:
    """Alternating minimisation over beta, S and U.

    Starts from ``beta = 0`` (or from ``init``). Each outer iteration
    refreshes the transition weights from the previous coefficients, then
    runs the coefficient step, the similarity step and the embedding step.
    ``step_log`` records the objective before and after every step, each
    pair evaluated with the same weights and row weights.
    """
    t0 = time.perf_counter()
    hp.check(ds.n)
    st = strata(ds)
    d_cov = covariate_distance(ds.X)

    def obj(beta, w, S, U):
        return objective(ds, beta, w, S, U, hp, st, d_cov)

    if init is None:
        beta = zero_beta(ds)
        w = estimate_weights(ds, beta, st)
        S = update_similarity(pairwise_distance(ds, beta, w, hp.mu, d_cov), hp)
        U = smallest_eigs(build_laplacian(S.S), hp.c)
    else:
        beta = [b.copy() for b in check_beta(ds, init.beta)]
        w, S, U = init.weights, init.S, init.U
        if U is None:
            U = smallest_eigs(build_laplacian(S.S), hp.c)

    trace = [_finite(obj(beta, w, S, U), "initialisation")]
    log = []
    converged = False
    it = 0
    for it in range(1, hp.max_outer + 1):
        if it > 1 or init is not None:
            w = estimate_weights(ds, beta, st)

        # Step 1: coefficients with S, U fixed
        before = obj(beta, w, S, U)
        if hp.gamma > 0 or it == 1:
            L = build_laplacian(S.S).L
            beta = prox_gradient_update(ds, beta, S.S, hp, w, st, L)
        after = _finite(obj(beta, w, S, U), "the coefficient step")
        log.append((it, 1, before, after))

        # Step 2: similarity rows with beta, U fixed
        dist = pairwise_distance(ds, beta, w, hp.mu, d_cov)
        S_new = update_similarity(dist, hp, U if hp.spectral_step2 else None)
        before = obj(beta, w, SimilarityMatrix(S.S, S_new.row_lambda, S.fallback_rows), U)
        S = S_new
        after = _finite(obj(beta, w, S, U), "the similarity step")
        log.append((it, 2, before, after))

        # Step 3: embedding with beta, S fixed
        before = after
        U = smallest_eigs(build_laplacian(S.S), hp.c)
        after = _finite(obj(beta, w, S, U), "the embedding step")
        log.append((it, 3, before, after))

        prev = trace[-1]
        trace.append(after)
        if abs(after - prev) / max(1.0, abs(prev)) < hp.outer_tol:
            converged = True
            break

    clusters = extract_clusters(S.S, U, hp.c, seed=seed)
    return FitResult(
        beta=beta,
        weights=w,
        S=S,
        U=U,
        clusters=clusters,
        objective_trace=trace,
        converged=converged,
        iterations=it,
        hp=hp,
        variant="full",
        step_log=log,
        runtime_s=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------

def uniform_similarity(n: int) -> np.ndarray:
    S = np.full((n, n), 1.0 / (n - 1))
    np.fill_diagonal(S, 0.0)
    return S


def rbf_similarity(X) -> np.ndarray:
    """Row-normalised Gaussian kernel with the median pairwise distance as bandwidth."""
    d2 = covariate_distance(X)
    n = d2.shape[0]
    iu = np.triu_indices(n, 1)
    sigma = float(np.median(np.sqrt(d2[iu])))
    if sigma <= 0:
        return uniform_similarity(n)
    A = np.exp(-d2 / (2.0 * sigma * sigma))
    np.fill_diagonal(A, 0.0)
    return A / A.sum(axis=1, keepdims=True)


def knn_similarity(X, kappa: int) -> np.ndarray:
    """``1/kappa`` on each patient's ``kappa`` nearest neighbours by covariate distance."""
    d2 = covariate_distance(X)
    n = d2.shape[0]
    if not 1 <= kappa <= n - 1:
        raise ValidationError(f"kappa must lie in [1, {n - 1}], got {kappa}")
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")[:, :kappa]
    S = np.zeros((n, n))
    S[np.arange(n)[:, None], order] = 1.0 / kappa
    return S


def _frozen_fit(ds, hp, S_fixed, variant, seed):
    t0 = time.perf_counter()
    n = ds.n
    st = strata(ds)
    d_cov = covariate_distance(ds.X)
    S = SimilarityMatrix(S_fixed, np.zeros(n), np.array([], dtype=int))
    U = smallest_eigs(build_laplacian(S_fixed), hp.c)
    beta = zero_beta(ds)
    w = estimate_weights(ds, beta, st)
    L = build_laplacian(S_fixed).L
    trace = [obj0 := objective(ds, beta, w, S, U, hp, st, d_cov)]
    _finite(obj0, "initialisation")
    log = []
    converged = False
    it = 0
    for it in range(1, hp.max_outer + 1):
        if it > 1:
            w = estimate_weights(ds, beta, st)
        before = objective(ds, beta, w, S, U, hp, st, d_cov)
        beta = prox_gradient_update(ds, beta, S_fixed, hp, w, st, L)
        after = _finite(objective(ds, beta, w, S, U, hp, st, d_cov), "the coefficient step")
        log.append((it, 1, before, after))
        prev = trace[-1]
        trace.append(after)
        if abs(after - prev) / max(1.0, abs(prev)) < hp.outer_tol:
            converged = True
            break
    return FitResult(beta, w, S, U, extract_clusters(S_fixed, U, hp.c, seed=seed), trace, converged, it, hp,
                     variant, log, time.perf_counter() - t0)


def baseline_fit(ds: MultiStateDataset, variant: str, hp: Hyperparams, seed: int = 0) -> FitResult:
    """Reference models sharing the coefficient solver.

    ``cox_only`` drops the similarity term (gamma = 0) and has no clusters.
    ``fixed_rbf_graph`` and ``knn_graph`` freeze S at a covariate-only graph
    and update only the coefficients (with weight refresh).
    """
    if variant == "full":
        return fit(ds, hp, seed=seed)
    hp.check(ds.n)
    if variant == "cox_only":
        t0 = time.perf_counter()
        hp0 = hp.replace(gamma=0.0, alpha_spec=0.0)
        st = strata(ds)
        beta = prox_gradient_update(ds, zero_beta(ds), None, hp0, np.ones(ds.K), st, np.zeros((1, 1)))
        w = estimate_weights(ds, beta, st)
        S = SimilarityMatrix(uniform_similarity(ds.n), np.zeros(ds.n), np.array([], dtype=int))
        o = _finite(objective(ds, beta, w, S, None, hp0, st), "the coefficient step")
        return FitResult(beta, w, S, None, None, [o], True, 1, hp0, variant, [], time.perf_counter() - t0)
    if variant == "fixed_rbf_graph":
        return _frozen_fit(ds, hp, rbf_similarity(ds.X), variant, seed)
    if variant == "knn_graph":
        kappa = hp.kappa if hp.kappa is not None else 10
        return _frozen_fit(ds, hp, knn_similarity(ds.X, kappa), variant, seed)
    raise ValidationError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


# ---------------------------------------------------------------------------
# grid search
# ---------------------------------------------------------------------------

@dataclass
class Candidate:
    hp: Hyperparams
    c_index: float
    logrank_p: float
    summary: dict


@dataclass
class GridSearchResult:
    candidates: list
    selected: int | None
    fits: list = field(default_factory=list, repr=False)

    @property
    def best(self) -> Candidate | None:
        return None if self.selected is None else self.candidates[self.selected]


def select_candidate(candidates: Sequence[Candidate], p_threshold: float = 0.05) -> int | None:
    """Index of the retained candidate with the largest C-index.

    Retained means ``logrank_p < p_threshold``. Ties go to fewer nonzero
    coefficients, then to the earlier grid position.
    """
    best, key = None, None
    for i, c in enumerate(candidates):
        if not (np.isfinite(c.logrank_p) and c.logrank_p < p_threshold and np.isfinite(c.c_index)):
            continue
        k = (-c.c_index, c.summary.get("nnz", 0), i)
        if key is None or k < key:
            best, key = i, k
    return best


def grid_search(
    ds: MultiStateDataset,
    grid: Sequence[Hyperparams],
    transition_for_c_index: int = 1,
    eval_ds: MultiStateDataset | None = None,
    p_threshold: float = 0.05,
    keep_fits: bool = False,
) -> GridSearchResult:
    """Fit every configuration and select by log-rank filter then C-index.

    ``transition_for_c_index`` is 1-based. The log-rank test compares the
    fitted clusters on that transition in ``ds``; the C-index is computed on
    ``eval_ds`` when supplied (a validation cohort), otherwise on ``ds``.
    """
    grid = list(grid)
    if not grid:
        raise ValidationError("grid is empty")
    k = transition_for_c_index - 1
    if not 0 <= k < ds.K:
        raise ValidationError(f"transition id must lie in [1, {ds.K}]")
    target = eval_ds if eval_ds is not None else ds
    candidates, fits = [], []
    for hp in grid:
        res = fit(ds, hp)
        rows = target.at_risk[:, k]
        risk = evaluation.transition_risk(target, res.beta, k)[rows]
        try:
            ci = evaluation.c_index(risk, target.times[rows, k], target.events[rows, k])
        except evaluation.UndefinedMetricError:
            ci = float("nan")
        lr = evaluation.cluster_logrank(ds, res.labels, k)
        p = lr.p if lr is not None else float("nan")
        candidates.append(Candidate(hp, ci, p, res.summary()))
        if keep_fits:
            fits.append(res)
    return GridSearchResult(candidates, select_candidate(candidates, p_threshold), fits)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

GRID_COLUMNS = ("eta", "gamma", "mu", "kappa_or_lambda", "alpha", "c")
_HP_KEYS = {
    "eta": float,
    "gamma": float,
    "mu": float,
    "kappa": int,
    "lambda": float,
    "alpha": float,
    "c": int,
    "outer_tol": float,
    "max_outer": int,
    "inner_tol": float,
    "max_inner": int,
    "spectral_step2": lambda v: v.strip().lower() in ("1", "true", "yes"),
}


def _kappa_or_lambda(text: str) -> dict:
    text = text.strip()
    try:
        return {"kappa": int(text), "lam": None}
    except ValueError:
        return {"kappa": None, "lam": float(text)}


def read_grid(path, base: Hyperparams | None = None) -> list[Hyperparams]:
    """Grid CSV with columns ``eta, gamma, mu, kappa_or_lambda, alpha, c``.

    An integer in ``kappa_or_lambda`` selects adaptive mode with that kappa;
    any other number is a global lambda.
    """
    base = base or Hyperparams()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cols = [c.strip() for c in (reader.fieldnames or [])]
        missing = set(GRID_COLUMNS) - set(cols)
        if missing:
            raise ValidationError(f"grid file lacks columns {sorted(missing)}")
        grid = []
        for line, row in enumerate(reader, start=2):
            row = {k.strip(): v for k, v in row.items() if k is not None}
            try:
                hp = base.replace(
                    eta=float(row["eta"]),
                    gamma=float(row["gamma"]),
                    mu=float(row["mu"]),
                    alpha_spec=float(row["alpha"]),
                    c=int(row["c"]),
                    **_kappa_or_lambda(row["kappa_or_lambda"]),
                )
            except (TypeError, ValueError) as exc:
                raise ValidationError(f"grid line {line}: {exc}") from None
            grid.append(hp)
    return grid


def write_grid(grid: Sequence[Hyperparams], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GRID_COLUMNS)
        for hp in grid:
            kl = str(hp.kappa) if hp.kappa is not None else repr(float(hp.lam))
            w.writerow([repr(hp.eta), repr(hp.gamma), repr(hp.mu), kl, repr(hp.alpha_spec), hp.c])


def parse_hyperparams(lines, base: Hyperparams | None = None) -> Hyperparams:
    """Build :class:`Hyperparams` from ``key=value`` lines (``#`` comments allowed)."""
    base = base or Hyperparams()
    kw = {}
    for n, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key = key.strip()
        if not sep or key not in _HP_KEYS:
            raise ValidationError(f"line {n}: unknown or malformed entry {line!r}")
        try:
            v = _HP_KEYS[key](val.strip())
        except ValueError:
            raise ValidationError(f"line {n}: bad value for {key}: {val.strip()!r}") from None
        name = {"lambda": "lam", "alpha": "alpha_spec"}.get(key, key)
        kw[name] = v
    return base.replace(**kw)


def read_hyperparams(path, base: Hyperparams | None = None) -> Hyperparams:
    with open(path, encoding="utf-8") as fh:
        return parse_hyperparams(fh, base)


def write_hyperparams(hp: Hyperparams, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"eta={hp.eta!r}\ngamma={hp.gamma!r}\nmu={hp.mu!r}\n")
        fh.write(f"kappa={hp.kappa}\n" if hp.kappa is not None else f"lambda={hp.lam!r}\n")
        fh.write(f"alpha={hp.alpha_spec!r}\nc={hp.c}\n")
        fh.write(f"outer_tol={hp.outer_tol!r}\nmax_outer={hp.max_outer}\n")
        fh.write(f"inner_tol={hp.inner_tol!r}\nmax_inner={hp.max_inner}\n")
        fh.write(f"spectral_step2={str(hp.spectral_step2).lower()}\n")
