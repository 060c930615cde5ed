import numpy as np
import pytest
from hypothesis import given, strategies as st

from trajclust.errors import ValidationError
from trajclust.graph import build_laplacian
from trajclust.spectral import extract_clusters, kmeans_labels, smallest_eigs

from conftest import random_row_stochastic


def path_laplacian(n):
    W = np.zeros((n, n))
    i = np.arange(n - 1)
    W[i, i + 1] = W[i + 1, i] = 1.0
    return np.diag(W.sum(axis=1)) - W


@given(st.integers(0, 100_000))
def test_embedding_orthonormal_and_residual(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 20))
    c = int(rng.integers(1, n))
    G = build_laplacian(random_row_stochastic(rng, n, density=0.5))
    emb = smallest_eigs(G, c)
    assert np.allclose(emb.U.T @ emb.U, np.eye(c), atol=1e-9)
    assert np.allclose(G.L @ emb.U, emb.U * emb.eigenvalues, atol=1e-8)
    assert np.all(np.diff(emb.eigenvalues) >= -1e-12)
    assert emb.trace(G) == pytest.approx(emb.eigenvalues.sum(), abs=1e-9)
    # Ky Fan: no orthonormal basis beats the eigenvectors
    Q = np.linalg.qr(rng.normal(size=(n, c)))[0]
    assert np.trace(Q.T @ G.L @ Q) >= emb.trace(G.L) - 1e-9
    full = np.linalg.eigvalsh(G.L)
    assert np.allclose(emb.eigenvalues, full[:c], atol=1e-9)


def test_path_graph_eigenvalues():
    n = 10
    emb = smallest_eigs(path_laplacian(n), 3)
    k = np.arange(3)
    assert np.allclose(emb.eigenvalues, 2 - 2 * np.cos(np.pi * k / n), atol=1e-10)
    assert np.allclose(np.abs(emb.U[:, 0]), 1 / np.sqrt(n))
    # Fiedler vector is monotone along the path
    f = emb.U[:, 1]
    assert np.all(np.diff(f) > 0) or np.all(np.diff(f) < 0)


def test_sign_convention_is_deterministic(rng):
    L = build_laplacian(random_row_stochastic(rng, 8)).L
    a, b = smallest_eigs(L, 3), smallest_eigs(L.copy(), 3)
    assert np.array_equal(a.U, b.U)
    idx = np.argmax(np.abs(a.U), axis=0)
    assert np.all(a.U[idx, np.arange(3)] > 0)


def test_c_out_of_range():
    with pytest.raises(ValidationError):
        smallest_eigs(np.eye(3), 3)


def test_kmeans_recovers_separated_clouds(rng):
    centres = np.array([[0, 0], [10, 0], [0, 10]], dtype=float)
    truth = np.repeat([0, 1, 2], 15)
    Y = centres[truth] + rng.normal(scale=0.3, size=(45, 2))
    assert np.array_equal(kmeans_labels(Y, 3), truth)
    assert np.array_equal(kmeans_labels(Y, 3, seed=1), kmeans_labels(Y, 3, seed=1))


def test_kmeans_constant_embedding():
    assert np.all(kmeans_labels(np.ones((6, 2)), 3) == 0)


@pytest.mark.filterwarnings("ignore::sklearn.exceptions.ConvergenceWarning")
def test_extract_uses_components_when_count_matches(rng):
    S = np.zeros((6, 6))
    S[:3, :3] = 0.5
    S[3:, 3:] = 0.5
    np.fill_diagonal(S, 0)
    U = smallest_eigs(build_laplacian(S), 2)
    res = extract_clusters(S, U, 2)
    assert res.method == "components" and res.labels.tolist() == [0, 0, 0, 1, 1, 1]
    res3 = extract_clusters(S, U, 3)
    assert res3.method == "kmeans-on-U" and res3.n_clusters <= 3


def test_block_graph_embedding_is_block_constant():
    S = np.zeros((7, 7))
    S[:4, :4] = 1 / 3
    S[4:, 4:] = 1 / 2
    np.fill_diagonal(S, 0)
    emb = smallest_eigs(build_laplacian(S), 2)
    assert np.allclose(emb.eigenvalues, 0, atol=1e-10)
    assert np.allclose(emb.U[:4], emb.U[0], atol=1e-8)
    assert np.allclose(emb.U[4:], emb.U[4], atol=1e-8)
