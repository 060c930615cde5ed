"""Stratified Cox partial likelihood with a graph penalty on linear predictors.

Each transition is its own stratum. For transition ``k`` the smooth part of
the coefficient subproblem is

    f_k(b) = -sum_i d_ik (x_ik'b - log sum_{j in R_ik} exp(x_jk'b))
             + gamma * w_k * sum_ij S_ij (b'(x_ik - x_jk))**2

with Breslow risk sets ``R_ik = {j at risk : T_jk >= T_ik}``. The graph term
equals ``2 gamma w_k r'Lr`` for ``r = X^k b`` and ``L`` the Laplacian of
``(S + S')/2``, which is how it is evaluated here.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import MultiStateDataset
from .errors import ConditioningError, StepSizeError, ValidationError
from .graph import laplacian_matrix

WEIGHT_FLOOR = 1e-6
HESSIAN_RIDGE = 1e-8


@dataclass
class CoxStratum:
    """Sorted view of one transition used by the likelihood routines."""

    X: np.ndarray  # covariates of at-risk patients, ascending time
    time: np.ndarray
    event: np.ndarray  # bool
    start: np.ndarray  # risk set of event e is positions start[e]:
    rows: np.ndarray  # positions of at-risk patients in the full cohort

    @classmethod
    def from_dataset(cls, ds: MultiStateDataset, k: int) -> "CoxStratum":
        rows = np.flatnonzero(ds.at_risk[:, k])
        order = np.argsort(ds.times[rows, k], kind="stable")
        rows = rows[order]
        time = ds.times[rows, k]
        event = ds.events[rows, k].astype(bool)
        start = np.searchsorted(time, time[event], side="left")
        return cls(ds.Xk(k)[rows], time, event, start, rows)

    @property
    def n_events(self) -> int:
        return int(self.event.sum())

    def _log_risk(self, lp):
        """``log sum_{j >= s} exp(lp_j)`` for every sorted position ``s``."""
        return np.logaddexp.accumulate(lp[::-1])[::-1]

    def _risk_sums(self, beta):
        lp = self.X @ beta
        m = lp.max() if lp.size else 0.0
        e = np.exp(lp - m)
        R = np.cumsum(e[::-1])[::-1]
        return lp, m, e, R

    def loss(self, beta: np.ndarray) -> float:
        if self.n_events == 0:
            return 0.0
        lp = self.X @ beta
        logR = self._log_risk(lp)
        return float(-(lp[self.event].sum() - logR[self.start].sum()))

    def _risk_means(self, lp, logR):
        """Risk-set means of the covariates at every event.

        One global shift is used when no risk-set sum underflows; otherwise the
        sums are rebuilt by a right-to-left scan with a running shift.
        """
        m = lp.max()
        e = np.exp(lp - m)
        if np.all(logR[self.start] - m > -600.0):
            RX = np.cumsum((e[:, None] * self.X)[::-1], axis=0)[::-1]
            return RX[self.start] / np.exp(logR[self.start] - m)[:, None]
        n, p = self.X.shape
        means = np.empty((n, p))
        acc = np.zeros(p)
        for s in range(n - 1, -1, -1):
            # mean over {s, ..., n-1} with weights exp(lp - logR[s])
            if s == n - 1:
                acc = self.X[s].copy()
            else:
                a = np.exp(lp[s] - logR[s])
                acc = a * self.X[s] + (1.0 - a) * acc
            means[s] = acc
        return means[self.start]

    def loss_grad(self, beta: np.ndarray) -> tuple[float, np.ndarray]:
        if self.n_events == 0:
            return 0.0, np.zeros_like(beta, dtype=float)
        lp = self.X @ beta
        logR = self._log_risk(lp)
        loss = -(lp[self.event].sum() - logR[self.start].sum())
        xbar = self._risk_means(lp, logR)
        grad = -(self.X[self.event] - xbar).sum(axis=0)
        return float(loss), grad

    def hessian(self, beta: np.ndarray) -> np.ndarray:
        """Observed information (Hessian of the negative log partial likelihood)."""
        p = self.X.shape[1]
        if self.n_events == 0:
            return np.zeros((p, p))
        _, _, e, R = self._risk_sums(beta)
        RX = np.cumsum((e[:, None] * self.X)[::-1], axis=0)[::-1]
        xbar = RX[self.start] / R[self.start, None]
        # patient j belongs to the risk set of every event whose start <= j
        inv_r = np.zeros(len(e))
        np.add.at(inv_r, self.start, 1.0 / R[self.start])
        c = np.cumsum(inv_r)
        H = (self.X * (e * c)[:, None]).T @ self.X - xbar.T @ xbar
        return 0.5 * (H + H.T)


def strata(ds: MultiStateDataset) -> list[CoxStratum]:
    return [CoxStratum.from_dataset(ds, k) for k in range(ds.K)]


def zero_beta(ds: MultiStateDataset) -> list[np.ndarray]:
    return [np.zeros(len(ix)) for ix in ds.feature_index]


def check_beta(ds: MultiStateDataset, beta: Sequence[np.ndarray]) -> list[np.ndarray]:
    if len(beta) != ds.K:
        raise ValidationError(f"expected {ds.K} coefficient vectors, got {len(beta)}")
    out = []
    for k, b in enumerate(beta):
        b = np.asarray(b, dtype=float)
        if b.shape != (len(ds.feature_index[k]),):
            raise ValidationError(f"beta[{k}] has shape {b.shape}, expected ({len(ds.feature_index[k])},)")
        if not np.all(np.isfinite(b)):
            raise ValidationError(f"beta[{k}] is not finite")
        out.append(b)
    return out


def cox_neg_log_partial_likelihood(ds: MultiStateDataset, beta, _strata=None) -> float:
    """Negative stratified Breslow log partial likelihood summed over transitions."""
    beta = check_beta(ds, beta)
    st = _strata if _strata is not None else strata(ds)
    total = 0.0
    for k, s in enumerate(st):
        if s.n_events == 0:
            warnings.warn(f"transition {k + 1} has no events; it contributes nothing")
        total += s.loss(beta[k])
    return total


def _as_operator(L):
    """Sparse copy of ``L`` when that makes the many mat-vecs cheaper."""
    if L.shape[0] > 200 and np.count_nonzero(L) < 0.2 * L.size:
        from scipy import sparse

        return sparse.csr_matrix(L)
    return L


def smooth_objective(ds, beta, S, gamma, weights, _strata=None, _L=None) -> float:
    """Cox loss plus the similarity penalty (everything but the L1 term)."""
    beta = check_beta(ds, beta)
    st = _strata if _strata is not None else strata(ds)
    L = _L if _L is not None else laplacian_matrix(np.asarray(S, dtype=float))
    total = 0.0
    for k in range(ds.K):
        total += st[k].loss(beta[k])
        if gamma:
            r = ds.Xk(k) @ beta[k]
            total += 2.0 * gamma * weights[k] * float(r @ (L @ r))
    return total


def smooth_gradient(ds, beta, S, gamma, weights, _strata=None, _L=None) -> list[np.ndarray]:
    """Gradient of :func:`smooth_objective`, one vector per transition.

    ``-sum_i d_ik (x_ik - xbar_ik) + 2 gamma w_k sum_ij S_ij (b'dx_ij) dx_ij``
    where ``xbar_ik`` is the exp(x'b)-weighted risk-set mean.
    """
    beta = check_beta(ds, beta)
    st = _strata if _strata is not None else strata(ds)
    L = _L if _L is not None else laplacian_matrix(np.asarray(S, dtype=float))
    grads = []
    for k in range(ds.K):
        _, g = st[k].loss_grad(beta[k])
        if gamma:
            Xk = ds.Xk(k)
            g = g + 4.0 * gamma * weights[k] * (Xk.T @ (L @ (Xk @ beta[k])))
        grads.append(g)
    return grads


def soft_threshold(v, t: float) -> np.ndarray:
    """Proximal map of ``t * ||.||_1``: ``sign(v) * max(|v| - t, 0)``."""
    if t < 0:
        raise ValidationError("threshold must be nonnegative")
    v = np.asarray(v, dtype=float)
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def _initial_step(s, Xk, b0, pen_w, L) -> float:
    """Inverse of an upper bound on the curvature of the smooth part at ``b0``."""
    bound = float(np.trace(s.hessian(b0))) if s.n_events else 0.0
    if pen_w:
        bound += 4.0 * pen_w * float(np.einsum("ij,ij->", Xk, L @ Xk))
    return 1.0 / bound if bound > 0 else 1.0


def _solve_stratum(s, Xk, b0, eta, pen_w, L, inner_tol, max_inner, step0=None):
    """FISTA with monotone safeguard and backtracking for one transition.

    Minimises ``s.loss(b) + pen_w * 2 r'Lr + eta * ||b||_1``. Returns the new
    coefficients and the last accepted step size.
    """

    def f_and_g(b):
        loss, g = s.loss_grad(b)
        if pen_w:
            r = Xk @ b
            Lr = L @ r
            loss += 2.0 * pen_w * float(r @ Lr)
            g = g + 4.0 * pen_w * (Xk.T @ Lr)
        return loss, g

    def f_only(b):
        loss = s.loss(b)
        if pen_w:
            r = Xk @ b
            loss += 2.0 * pen_w * float(r @ (L @ r))
        return loss

    def F(b, fb):
        return fb + eta * np.abs(b).sum()

    x = b0.copy()
    fx = f_only(x)
    Fx = F(x, fx)
    y, t_mom = x, 1.0
    step = _initial_step(s, Xk, x, pen_w, L) if step0 is None else step0
    for _ in range(max_inner):
        fy, gy = f_and_g(y)
        if not (np.isfinite(fy) and np.all(np.isfinite(gy))):
            if y is x:
                raise StepSizeError("smooth objective is not finite at the current iterate")
            y, t_mom = x, 1.0
            continue
        for _halving in range(51):
            cand = soft_threshold(y - step * gy, step * eta)
            diff = cand - y
            fc = f_only(cand)
            if fc <= fy + gy @ diff + (diff @ diff) / (2.0 * step) + 1e-12 * max(1.0, abs(fy)):
                break
            step *= 0.5
        else:
            raise StepSizeError("line search failed after 50 halvings")
        Fc = F(cand, fc)
        if Fc > Fx:
            # momentum overshoot: restart from x with a plain proximal step
            if y is x or np.array_equal(y, x):
                break
            y, t_mom = x, 1.0
            continue
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_mom ** 2))
        y = cand + ((t_mom - 1.0) / t_next) * (cand - x)
        t_mom = t_next
        rel = (Fx - Fc) / max(1.0, abs(Fx))
        x, fx, Fx = cand, fc, Fc
        step *= 2.0
        if rel < inner_tol:
            break
    return x, step


def prox_gradient_update(ds, beta, S, hp, weights, _strata=None, _L=None) -> list[np.ndarray]:
    """Proximal-gradient solve of the coefficient subproblem with S fixed.

    Each transition is solved independently (the subproblem separates) by
    accelerated proximal gradient with backtracking and a monotone restart.
    The returned coefficients never increase the subproblem objective
    relative to ``beta``.
    """
    beta = check_beta(ds, beta)
    st = _strata if _strata is not None else strata(ds)
    L = _L if _L is not None else laplacian_matrix(np.asarray(S, dtype=float))
    L = _as_operator(L) if hp.gamma else L
    out = []
    for k in range(ds.K):
        pen_w = hp.gamma * weights[k]
        b, _ = _solve_stratum(st[k], ds.Xk(k), beta[k], hp.eta, pen_w, L, hp.inner_tol, hp.max_inner)
        out.append(b)
    return out


def step1_objective(ds, beta, S, hp, weights, _strata=None, _L=None) -> float:
    l1 = sum(np.abs(b).sum() for b in check_beta(ds, beta))
    return smooth_objective(ds, beta, S, hp.gamma, weights, _strata, _L) + hp.eta * l1


def estimate_weights(ds, beta, _strata=None) -> np.ndarray:
    """Inverse-variance transition weights ``w_k = 1 / Var(beta_k)``.

    ``Var(beta_k)`` is the mean of the diagonal of the inverse observed
    information (with a ``1e-8`` ridge). Transitions without events get the
    floor weight ``1e-6``.
    """
    beta = check_beta(ds, beta)
    st = _strata if _strata is not None else strata(ds)
    w = np.empty(ds.K)
    for k, s in enumerate(st):
        p = len(beta[k])
        if s.n_events == 0 or p == 0:
            w[k] = WEIGHT_FLOOR
            continue
        H = s.hessian(beta[k]) + HESSIAN_RIDGE * np.eye(p)
        try:
            cond = np.linalg.cond(H)
            if not np.isfinite(cond) or cond > 1e15:
                raise np.linalg.LinAlgError
            var = np.diag(np.linalg.inv(H))
        except np.linalg.LinAlgError:
            raise ConditioningError(f"information matrix of transition {k + 1} is singular") from None
        w[k] = max(1.0 / float(var.mean()), WEIGHT_FLOOR)
    return w
