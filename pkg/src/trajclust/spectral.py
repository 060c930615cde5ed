"""Smallest Laplacian eigenpairs and cluster extraction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from sklearn.cluster import KMeans

from .errors import ValidationError
from .graph import GraphLaplacian, connected_components


@dataclass
class SpectralEmbedding:
    """``U`` (n x c, orthonormal columns) and the matching ascending eigenvalues."""

    U: np.ndarray
    eigenvalues: np.ndarray

    def trace(self, L) -> float:
        L = L.L if isinstance(L, GraphLaplacian) else L
        return float(np.einsum("ij,ij->", self.U, L @ self.U))


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    method: str  # "components" or "kmeans-on-U"

    @property
    def n_clusters(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0


def smallest_eigs(L, c: int) -> SpectralEmbedding:
    """Eigenvectors of the ``c`` smallest eigenvalues of a symmetric ``L``.

    Dense decomposition. Each column is signed so that its largest-magnitude
    entry is positive.
    """
    L = L.L if isinstance(L, GraphLaplacian) else np.asarray(L, dtype=float)
    n = L.shape[0]
    if not 1 <= c < n:
        raise ValidationError(f"need 1 <= c < n, got c={c}, n={n}")
    vals, vecs = scipy.linalg.eigh(L, subset_by_index=[0, c - 1])
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(c)])
    signs[signs == 0] = 1.0
    return SpectralEmbedding(vecs * signs, vals)


def _first_seen_labels(raw: np.ndarray) -> np.ndarray:
    _, first, inverse = np.unique(raw, return_index=True, return_inverse=True)
    rank = np.empty(len(first), dtype=int)
    rank[np.argsort(first)] = np.arange(len(first))
    return rank[inverse]


def kmeans_labels(Y: np.ndarray, c: int, n_init: int = 50, seed: int = 0) -> np.ndarray:
    if np.allclose(Y, Y[0]):
        return np.zeros(len(Y), dtype=int)
    km = KMeans(n_clusters=c, n_init=n_init, random_state=seed).fit(Y)
    return _first_seen_labels(km.labels_)


def extract_clusters(S, U, c: int, edge_tol: float = 1e-8, seed: int = 0) -> ClusterAssignment:
    """Connected components when there are exactly ``c``, else k-means on ``U``."""
    count, labels = connected_components(S, edge_tol)
    if count == c:
        return ClusterAssignment(labels, "components")
    U = U.U if isinstance(U, SpectralEmbedding) else np.asarray(U, dtype=float)
    return ClusterAssignment(kmeans_labels(U, c, seed=seed), "kmeans-on-U")
