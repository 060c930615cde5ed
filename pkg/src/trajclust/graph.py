"""Patient distances, row-wise similarity learning and graph Laplacians."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.sparse.csgraph import connected_components as _cc
from scipy.spatial.distance import cdist

from .errors import ValidationError


@dataclass
class DistanceMatrix:
    """Combined distance ``d = mu * d_cov + d_msm`` with its components."""

    d: np.ndarray
    d_cov: np.ndarray
    d_msm: np.ndarray
    mu: float


@dataclass
class SimilarityMatrix:
    """Row-stochastic similarity with the per-row quadratic weights used.

    ``row_lambda[i]`` is the weight of ``||S_i||^2`` in row ``i``'s problem
    (constant in global mode). ``fallback_rows`` lists rows where the
    adaptive rule degenerated and uniform weights were used instead.
    """

    S: np.ndarray
    row_lambda: np.ndarray
    fallback_rows: np.ndarray


@dataclass
class GraphLaplacian:
    L: np.ndarray
    D: np.ndarray


def covariate_distance(X) -> np.ndarray:
    """Squared Euclidean distances between rows of ``X``."""
    X = np.asarray(X, dtype=float)
    return cdist(X, X, "sqeuclidean")


def msm_distance(ds, beta, weights) -> np.ndarray:
    """Weighted squared log hazard-ratio distance ``sum_k w_k (b_k'(x_ik - x_jk))^2``."""
    d = np.zeros((ds.n, ds.n))
    for k in range(ds.K):
        r = ds.Xk(k) @ np.asarray(beta[k], dtype=float)
        if not np.any(r):
            continue
        diff = r[:, None] - r[None, :]
        d += weights[k] * diff * diff
    return d


def pairwise_distance(ds, beta, weights, mu: float, d_cov=None) -> DistanceMatrix:
    if d_cov is None:
        d_cov = covariate_distance(ds.X)
    d_msm = msm_distance(ds, beta, weights)
    return DistanceMatrix(mu * d_cov + d_msm, d_cov, d_msm, mu)


def _neighbor_order(d: np.ndarray) -> np.ndarray:
    """Per-row neighbour ranking excluding self, ties broken by index."""
    n = d.shape[0]
    work = d.astype(float, copy=True)
    np.fill_diagonal(work, np.inf)
    order = np.argsort(work, axis=1, kind="stable")
    return order[:, : n - 1]


def adaptive_rows(d: np.ndarray, kappa: int, gamma: float):
    """Closed-form kappa-neighbour rows.

    With ``d_(1) <= ... <= d_(kappa+1)`` the sorted off-diagonal distances of
    row ``i``, ``lambda_i = gamma/2 * (kappa d_(kappa+1) - sum_{j<=kappa} d_(j))``
    and ``S_ij = (d_(kappa+1) - d_ij) / (kappa d_(kappa+1) - sum d_(j))`` on
    the ``kappa`` nearest neighbours. This is the exact minimiser of
    ``gamma d_i's + lambda_i ||s||^2`` over the simplex; it does not depend on
    ``gamma`` once ``gamma > 0``.
    """
    n = d.shape[0]
    if not 1 <= kappa <= n - 1:
        raise ValidationError(f"kappa must lie in [1, n-1] = [1, {n - 1}], got {kappa}")
    order = _neighbor_order(d)
    rows = np.arange(n)[:, None]
    sorted_d = d[rows, order]
    near = order[:, :kappa]
    d_near = sorted_d[:, :kappa]
    if kappa < n - 1:
        d_next = sorted_d[:, kappa]
    else:
        # every other patient is a neighbour: there is no excluded boundary
        # distance, so use the farthest one (its weight becomes 0)
        d_next = sorted_d[:, -1]
    gap = kappa * d_next - d_near.sum(axis=1)
    scale = np.maximum(np.abs(d_next), 1e-300)
    degenerate = gap <= 1e-12 * kappa * scale
    S = np.zeros((n, n))
    safe_gap = np.where(degenerate, 1.0, gap)
    vals = (d_next[:, None] - d_near) / safe_gap[:, None]
    vals = np.where(degenerate[:, None], 1.0 / kappa, np.maximum(vals, 0.0))
    vals /= vals.sum(axis=1, keepdims=True)
    S[rows, near] = vals
    lam = np.where(degenerate, 0.0, 0.5 * gamma * gap)
    fallback = np.flatnonzero(degenerate)
    if fallback.size:
        warnings.warn(
            f"{fallback.size} similarity rows have equal neighbour distances; "
            "using uniform weights on their nearest neighbours"
        )
    return S, lam, fallback


def project_simplex_rows(V: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row of ``V`` onto the probability simplex."""
    n, m = V.shape
    U = -np.sort(-V, axis=1)
    css = np.cumsum(U, axis=1) - 1.0
    ind = np.arange(1, m + 1)
    cond = U - css / ind > 0
    rho = np.count_nonzero(cond, axis=1)
    theta = css[np.arange(n), rho - 1] / rho
    return np.maximum(V - theta[:, None], 0.0)


def global_rows(d: np.ndarray, lam: float, gamma: float) -> np.ndarray:
    """Rows ``S_ij = ((eta_i - gamma d_ij) / (2 lam))_+`` with eta_i fixing the row sum.

    The multiplier eta_i is found exactly by the sort-based simplex
    projection; self-similarity is excluded.
    """
    if lam <= 0:
        raise ValidationError("global mode needs lambda > 0")
    n = d.shape[0]
    off = ~np.eye(n, dtype=bool)
    V = (-gamma * d / (2.0 * lam))[off].reshape(n, n - 1)
    P = project_simplex_rows(V)
    S = np.zeros((n, n))
    S[off] = P.ravel()
    return S


def embedding_distance(U) -> np.ndarray:
    """Squared Euclidean distances between rows of the spectral embedding."""
    return covariate_distance(getattr(U, "U", U))


def update_similarity(dist, hp, U=None) -> SimilarityMatrix:
    """Solve every row of the similarity subproblem.

    Row ``i`` minimises ``sum_j a_ij s_j + lambda_i ||s||^2`` over the simplex
    (self excluded), with ``a_ij = gamma d_ij``. When ``U`` is given and
    ``hp.alpha_spec > 0`` the spectral term is folded in as
    ``a_ij += alpha/2 ||u_i - u_j||^2``, which is exactly the dependence of
    ``alpha Tr(U'LU)`` on ``S``.

    ``hp.kappa`` selects adaptive mode; ``hp.lam`` selects global mode.
    """
    d = dist.d if isinstance(dist, DistanceMatrix) else np.asarray(dist, dtype=float)
    n = d.shape[0]
    alpha = float(getattr(hp, "alpha_spec", 0.0) or 0.0)
    if U is not None and alpha > 0:
        du = embedding_distance(U)
        if hp.gamma > 0:
            scale, a = hp.gamma, d + (alpha / (2.0 * hp.gamma)) * du
        else:
            scale, a = 0.5 * alpha, du
    else:
        scale, a = hp.gamma, d
    if hp.kappa is not None:
        S, lam, fb = adaptive_rows(a, hp.kappa, scale)
    else:
        S = global_rows(a, hp.lam, scale)
        lam, fb = np.full(n, float(hp.lam)), np.array([], dtype=int)
    return SimilarityMatrix(S, lam, fb)


def laplacian_matrix(S) -> np.ndarray:
    S = np.asarray(S, dtype=float)
    W = 0.5 * (S + S.T)
    L = -W
    L[np.diag_indices_from(L)] += W.sum(axis=1)
    return L


def build_laplacian(S) -> GraphLaplacian:
    """Unnormalised Laplacian ``L = D - (S + S')/2``."""
    S = np.asarray(S, dtype=float)
    W = 0.5 * (S + S.T)
    D = np.diag(W.sum(axis=1))
    return GraphLaplacian(D - W, D)


def connected_components(S, edge_tol: float = 1e-8) -> tuple[int, np.ndarray]:
    """Components of the graph with edges ``(S_ij + S_ji)/2 > edge_tol``.

    Labels are numbered in order of each component's smallest patient index.
    """
    if edge_tol < 0:
        raise ValidationError("edge_tol must be nonnegative")
    S = np.asarray(S, dtype=float)
    A = 0.5 * (S + S.T) > edge_tol
    count, raw = _cc(A, directed=False)
    _, first = np.unique(raw, return_index=True)
    relabel = np.empty(count, dtype=int)
    relabel[np.argsort(first)] = np.arange(count)
    return int(count), relabel[raw]


def within_cluster_mask(labels) -> np.ndarray:
    labels = np.asarray(labels)
    return labels[:, None] == labels[None, :]
