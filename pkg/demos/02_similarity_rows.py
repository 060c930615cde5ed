"""How the learned similarity graph behaves on a small example.

Each row of S solves a small simplex-constrained quadratic program. In
adaptive mode the quadratic weight is chosen per row so that exactly kappa
neighbours receive mass.
"""
import warnings

import numpy as np

from trajclust import optimizer as opt
from trajclust.graph import build_laplacian, connected_components, covariate_distance, update_similarity
from trajclust.spectral import smallest_eigs

# Distances (0, 1, 2, 4) from patient 0, kappa = 2, gamma = 1.
d = np.ones((5, 5))
np.fill_diagonal(d, 0)
d[0, 1:] = [0.0, 1.0, 2.0, 4.0]
# The other rows are all-equal filler and take the uniform fallback.
with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    res = update_similarity(d, opt.Hyperparams(kappa=2, gamma=1.0, alpha_spec=0.0))
print("row weight", res.row_lambda[0], "row", np.round(res.S[0], 4))

# Two well separated groups of points: the graph splits into components.
rng = np.random.default_rng(1)
X = np.vstack([rng.normal(size=(6, 2)), 8 + rng.normal(size=(6, 2))])
D = covariate_distance(X)
for kappa in (2, 5, 8):
    S = update_similarity(D, opt.Hyperparams(kappa=kappa, gamma=1.0, alpha_spec=0.0)).S
    count, labels = connected_components(S)
    ev = np.linalg.eigvalsh(build_laplacian(S).L)
    print("kappa=%d: %d components, labels %s, smallest eigenvalues %s"
          % (kappa, count, labels, np.round(ev[:3], 4)))

# The spectral embedding spans the indicator vectors of the components.
S = update_similarity(D, opt.Hyperparams(kappa=3, gamma=1.0, alpha_spec=0.0)).S
emb = smallest_eigs(build_laplacian(S), 2)
print("embedding rows (first column sign fixed):")
print(np.round(emb.U, 3))
