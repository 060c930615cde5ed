"""Synthetic clustered multi-state cohorts with known structure.

Patients fall into latent clusters with distinct covariate means, move along
a chain of transitions with Weibull proportional-hazards sojourns, and are
right-censored by a uniform follow-up time calibrated to a target rate.
"""
from __future__ import annotations

import csv
import dataclasses
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .dataset import MultiStateDataset, TransitionSpec, write_dataset
from .errors import CalibrationError, TuningError, ValidationError


class TuningWarning(UserWarning):
    """The requested similarity gap is out of reach of the bandwidth grid."""


@dataclass(frozen=True)
class SimulationConfig:
    """Generator settings. Every field has a default; see ``parse_config``."""

    n: int = 500
    p: int = 30
    K: int = 2
    C: int = 4
    pi: tuple | None = None  # cluster prior, uniform when None
    tau: float = 1.0
    rho: float = 0.0
    sigma_diag: tuple | None = None  # per-feature sd, ones when None
    s: float = 0.2
    weibull_scale: tuple | None = None  # alpha_k, ones when None
    weibull_shape: tuple | None = None  # nu_k, ones when None
    target_censoring: float = 0.25
    sigma_X: float | None = None  # S* kernel bandwidths, tuned when None
    sigma_lambda: float | None = None
    target_gap: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.n < 2 or self.p < 1 or self.K < 1 or self.C < 1:
            raise ValidationError("need n >= 2, p >= 1, K >= 1, C >= 1")
        if self.C > self.n:
            raise ValidationError("more clusters than patients")
        if self.tau < 0 or not 0 <= self.rho < 1:
            raise ValidationError("need tau >= 0 and rho in [0, 1)")
        if not 0 < self.s <= 1:
            raise ValidationError("signal fraction s must lie in (0, 1]")
        if not 0 <= self.target_censoring <= 0.9:
            raise ValidationError("target_censoring must lie in [0, 0.9]")
        pi = self.prior
        if pi.shape != (self.C,) or np.any(pi < 0) or abs(pi.sum() - 1) > 1e-9:
            raise ValidationError("pi must be C nonnegative weights summing to 1")
        if self.sd.shape != (self.p,) or np.any(self.sd <= 0):
            raise ValidationError("sigma_diag must hold p positive values")
        for name, arr in (("weibull_scale", self.scales), ("weibull_shape", self.shapes)):
            if arr.shape != (self.K,) or np.any(arr <= 0):
                raise ValidationError(f"{name} must hold K positive values")
        for name in ("sigma_X", "sigma_lambda"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValidationError(f"{name} must be nonnegative")

    @property
    def prior(self) -> np.ndarray:
        return np.full(self.C, 1.0 / self.C) if self.pi is None else np.asarray(self.pi, dtype=float)

    @property
    def sd(self) -> np.ndarray:
        return np.ones(self.p) if self.sigma_diag is None else np.asarray(self.sigma_diag, dtype=float)

    @property
    def scales(self) -> np.ndarray:
        return np.ones(self.K) if self.weibull_scale is None else np.asarray(self.weibull_scale, dtype=float)

    @property
    def shapes(self) -> np.ndarray:
        return np.ones(self.K) if self.weibull_shape is None else np.asarray(self.weibull_shape, dtype=float)

    @property
    def covariance(self) -> np.ndarray:
        idx = np.arange(self.p)
        sd = self.sd
        return self.rho ** np.abs(idx[:, None] - idx[None, :]) * np.outer(sd, sd)

    @property
    def n_signal(self) -> int:
        return max(1, int(round(self.s * self.p)))

    def replace(self, **kw) -> "SimulationConfig":
        return dataclasses.replace(self, **kw)


@dataclass
class CohortStructure:
    """Population-level quantities shared by every cohort drawn from a config."""

    means: np.ndarray  # C x p cluster centres
    beta_shared: np.ndarray
    beta: np.ndarray  # K x p true coefficients


@dataclass
class SimulatedCohort:
    ds: MultiStateDataset
    true_clusters: np.ndarray
    true_beta: np.ndarray  # K x p
    S_star: np.ndarray
    q_used: float
    config: SimulationConfig
    structure: CohortStructure = field(repr=False)
    censoring_rate: float = float("nan")
    tuning_flagged: bool = False


# ---------------------------------------------------------------------------
# pieces of the generator
# ---------------------------------------------------------------------------

def _structure(cfg: SimulationConfig, rng: np.random.Generator) -> CohortStructure:
    means = rng.normal(0.0, cfg.tau, size=(cfg.C, cfg.p))
    shared = rng.normal(size=cfg.p)
    beta = np.empty((cfg.K, cfg.p))
    for k in range(cfg.K):
        delta = np.zeros(cfg.p)
        idx = rng.choice(cfg.p, size=cfg.n_signal, replace=False)
        delta[idx] = rng.normal(size=idx.size)
        beta[k] = shared + delta
    return CohortStructure(means, shared, beta)


def _assign_clusters(cfg, rng) -> np.ndarray:
    sizes = rng.multinomial(cfg.n, cfg.prior)
    labels = np.repeat(np.arange(cfg.C), sizes)
    rng.shuffle(labels)
    return labels


def weibull_sojourns(lp, scale, shape, rng) -> np.ndarray:
    """Inverse-transform draws from ``S(t) = exp(-scale exp(lp) t**shape)``."""
    u = rng.uniform(size=np.shape(lp))
    # T = (-log U / (scale exp(lp)))^(1/shape), evaluated on the log scale
    return np.exp((np.log(-np.log(u)) - np.log(scale) - lp) / shape)


def censoring_rate(q: float, times) -> float:
    """Expected fraction with ``C < T`` when ``C ~ U(0, q)``."""
    t = np.asarray(times, dtype=float)
    if np.isinf(q):
        return 0.0
    return float(np.mean(np.minimum(t, q)) / q)


def calibrate_censoring(times, target: float, tol: float = 1e-10, max_iter: int = 200) -> float:
    """Horizon ``q`` of ``C ~ U(0, q)`` whose expected censoring rate is ``target``.

    Bisection over ``[min(times)/10, 10 max(times)]`` on the decreasing map
    ``q -> mean(min(T, q))/q``. A zero target means no censoring and returns
    ``inf``.
    """
    t = np.asarray(times, dtype=float)
    if t.size == 0 or np.any(~np.isfinite(t)) or np.any(t <= 0):
        raise CalibrationError("need a nonempty set of positive finite times")
    if not 0 <= target <= 0.9:
        raise CalibrationError(f"target {target} outside [0, 0.9]")
    if target == 0:
        return float("inf")
    lo, hi = t.min() / 10.0, 10.0 * t.max()
    r_lo, r_hi = censoring_rate(lo, t), censoring_rate(hi, t)
    if not r_hi <= target <= r_lo:
        raise CalibrationError(
            f"target rate {target:.4f} not bracketed: rate ranges over [{r_hi:.4f}, {r_lo:.4f}] "
            f"for q in [{lo:.4g}, {hi:.4g}]"
        )
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if censoring_rate(mid, t) > target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * hi:
            break
    q = 0.5 * (lo + hi)
    if abs(censoring_rate(q, t) - target) > 0.01:
        raise CalibrationError("bisection did not reach the target rate within 0.01")
    return q


def _observe(sojourns: np.ndarray, cens: np.ndarray):
    """Clock-reset observed times and indicators along a chain."""
    n, K = sojourns.shape
    entry = np.zeros(n)
    times = np.zeros((n, K))
    events = np.zeros((n, K), dtype=np.int8)
    alive = np.ones(n, dtype=bool)  # entered the origin state of k before censoring
    for k in range(K):
        exit_ = entry + sojourns[:, k]
        observed = alive & (exit_ <= cens)
        times[alive, k] = np.where(observed[alive], sojourns[alive, k], cens[alive] - entry[alive])
        events[observed, k] = 1
        alive = observed
        entry = exit_
    return times, events


def ground_truth_similarity(X, true_beta, sigma_X: float, sigma_lambda: float) -> np.ndarray:
    """Row softmax of ``-sigma_X ||X_i - X_j||^2 - sigma_lambda sum_k |b_k'(X_i - X_j)|``.

    The self term is excluded from each row.
    """
    if sigma_X < 0 or sigma_lambda < 0:
        raise ValidationError("bandwidths must be nonnegative")
    dx, dl = _kernel_distances(X, true_beta)
    return _softmax_rows(-sigma_X * dx - sigma_lambda * dl)


def _kernel_distances(X, true_beta):
    from scipy.spatial.distance import cdist

    X = np.asarray(X, dtype=float)
    B = np.atleast_2d(np.asarray(true_beta, dtype=float))
    dx = cdist(X, X, "sqeuclidean")
    r = X @ B.T
    dl = cdist(r, r, "cityblock")
    return dx, dl


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(float, copy=True)
    np.fill_diagonal(z, -np.inf)
    return np.exp(z - logsumexp(z, axis=1, keepdims=True))


def similarity_gap(S, labels) -> float:
    """Mean within-cluster minus mean between-cluster off-diagonal entry."""
    S = np.asarray(S, dtype=float)
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    diff = labels[:, None] != labels[None, :]
    if not diff.any():
        raise TuningError("similarity gap needs at least two clusters")
    if not same.any():
        raise TuningError("similarity gap needs a cluster with two members")
    return float(S[same].mean() - S[diff].mean())


def default_bandwidth_grid(num: int = 16) -> np.ndarray:
    return np.concatenate([[0.0], np.logspace(-4, 1, num)])


def tune_kernel_bandwidths(cohort_or_X, target_gap: float = 0.05, labels=None, true_beta=None, grid=None):
    """Bandwidth pair whose S* gap is closest to ``target_gap``.

    Searches the full product of ``grid`` (zero plus log-spaced values) for
    both bandwidths. Ties go to the smaller bandwidths. Returns
    ``(sigma_X, sigma_lambda, gap, flagged)`` where ``flagged`` marks that
    every gap on the grid fell below ``target_gap / 2``.
    """
    if isinstance(cohort_or_X, SimulatedCohort):
        X, labels, true_beta = cohort_or_X.ds.X, cohort_or_X.true_clusters, cohort_or_X.true_beta
    else:
        X = cohort_or_X
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise TuningError("bandwidth tuning needs at least two true clusters")
    grid = default_bandwidth_grid() if grid is None else np.sort(np.asarray(grid, dtype=float))
    dx, dl = _kernel_distances(X, true_beta)
    best, best_err, gaps = None, np.inf, []
    for sx in grid:
        for sl in grid:
            g = similarity_gap(_softmax_rows(-sx * dx - sl * dl), labels)
            gaps.append(g)
            err = abs(g - target_gap)
            # strict improvement only, so the first (smallest) pair wins ties
            if err < best_err - 1e-15:
                best, best_err = (float(sx), float(sl), g), err
    flagged = target_gap > 0 and max(gaps) < target_gap / 2
    if flagged:
        warnings.warn(
            f"largest achievable similarity gap {max(gaps):.4g} is below half the target {target_gap:.4g}",
            TuningWarning,
        )
    return best[0], best[1], best[2], flagged


# ---------------------------------------------------------------------------
# public generator
# ---------------------------------------------------------------------------

def _draw(cfg: SimulationConfig, struct: CohortStructure, rng, q=None):
    labels = _assign_clusters(cfg, rng)
    L = np.linalg.cholesky(cfg.covariance)
    X = struct.means[labels] + rng.normal(size=(cfg.n, cfg.p)) @ L.T
    lp = X @ struct.beta.T
    soj = np.column_stack(
        [weibull_sojourns(lp[:, k], cfg.scales[k], cfg.shapes[k], rng) for k in range(cfg.K)]
    )
    terminal = soj.sum(axis=1)
    if q is None:
        q = calibrate_censoring(terminal, cfg.target_censoring)
    cens = np.full(cfg.n, np.inf) if np.isinf(q) else rng.uniform(0.0, q, size=cfg.n)
    times, events = _observe(soj, cens)
    spec = TransitionSpec.chain(cfg.K)
    width = len(str(cfg.n))
    ds = MultiStateDataset(
        spec=spec,
        patient_ids=[f"P{i + 1:0{width}d}" for i in range(cfg.n)],
        X=X,
        feature_names=[f"x{j + 1}" for j in range(cfg.p)],
        feature_index=[np.arange(cfg.p)] * cfg.K,
        times=times,
        events=events,
    )
    rate = float(np.mean(terminal > cens))
    return ds, labels, q, rate


def generate(cfg: SimulationConfig) -> SimulatedCohort:
    """Draw one cohort. Bandwidths left as ``None`` are tuned to ``cfg.target_gap``."""
    ss_struct, ss_pat = np.random.SeedSequence(cfg.seed).spawn(2)
    struct = _structure(cfg, np.random.default_rng(ss_struct))
    ds, labels, q, rate = _draw(cfg, struct, np.random.default_rng(ss_pat))
    flagged = False
    sx, sl = cfg.sigma_X, cfg.sigma_lambda
    if sx is None or sl is None:
        if cfg.C < 2:
            sx, sl = (sx or 0.0), (sl or 0.0)
        else:
            tx, tl, _, flagged = tune_kernel_bandwidths(ds.X, cfg.target_gap, labels, struct.beta)
            sx = tx if sx is None else sx
            sl = tl if sl is None else sl
    S_star = ground_truth_similarity(ds.X, struct.beta, sx, sl)
    eff = cfg.replace(sigma_X=sx, sigma_lambda=sl)
    return SimulatedCohort(ds, labels, struct.beta.copy(), S_star, q, eff, struct, rate, flagged)


def generate_companion(cohort: SimulatedCohort, index: int = 1, n: int | None = None) -> SimulatedCohort:
    """Independent patients from the same population as ``cohort``.

    Cluster centres, true coefficients and the censoring horizon are reused;
    only the patient-level draws change. Useful as a held-out test set.
    """
    cfg = cohort.config if n is None else cohort.config.replace(n=n)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, index]).spawn(2)[1])
    ds, labels, q, rate = _draw(cfg, cohort.structure, rng, q=cohort.q_used)
    S_star = ground_truth_similarity(ds.X, cohort.true_beta, cfg.sigma_X, cfg.sigma_lambda)
    return SimulatedCohort(ds, labels, cohort.true_beta, S_star, q, cfg, cohort.structure, rate,
                           cohort.tuning_flagged)


# ---------------------------------------------------------------------------
# config files and export
# ---------------------------------------------------------------------------

_TUPLE_KEYS = {"pi", "sigma_diag", "weibull_scale", "weibull_shape"}
_INT_KEYS = {"n", "p", "K", "C", "seed"}
_OPTIONAL_KEYS = {"sigma_X", "sigma_lambda"}


def parse_config(lines, base: SimulationConfig | None = None) -> SimulationConfig:
    """``key=value`` lines; tuple fields take comma-separated numbers."""
    base = base or SimulationConfig()
    names = {f.name for f in dataclasses.fields(SimulationConfig)}
    kw = {}
    for no, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep or key not in names:
            raise ValidationError(f"line {no}: unknown or malformed entry {line!r}")
        try:
            if key in _TUPLE_KEYS:
                kw[key] = None if val.lower() in ("", "none") else tuple(float(v) for v in val.split(","))
            elif key in _INT_KEYS:
                kw[key] = int(val)
            elif key in _OPTIONAL_KEYS and val.lower() in ("", "none"):
                kw[key] = None
            else:
                kw[key] = float(val)
        except ValueError:
            raise ValidationError(f"line {no}: bad value for {key}: {val!r}") from None
    return base.replace(**kw)


def read_config(path, base: SimulationConfig | None = None) -> SimulationConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh, base)


def format_config(cfg: SimulationConfig, extra: dict | None = None) -> str:
    out = []
    for f in dataclasses.fields(SimulationConfig):
        v = getattr(cfg, f.name)
        if v is None:
            s = "none"
        elif isinstance(v, tuple):
            s = ",".join(repr(float(x)) for x in v)
        else:
            s = repr(v)
        out.append(f"{f.name}={s}")
    for k, v in (extra or {}).items():
        out.append(f"# {k}={v!r}")
    return "\n".join(out) + "\n"


def write_cohort(cohort: SimulatedCohort, out_dir) -> None:
    """Dataset CSVs plus ``truth_clusters.csv``, ``truth_beta.csv`` and ``s_star.csv``."""
    os.makedirs(out_dir, exist_ok=True)
    write_dataset(cohort.ds, out_dir)
    ds = cohort.ds
    with open(os.path.join(out_dir, "truth_clusters.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "cluster"])
        w.writerows(zip(ds.patient_ids, cohort.true_clusters.tolist()))
    with open(os.path.join(out_dir, "truth_beta.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["transition_id", *ds.feature_names])
        for k, b in enumerate(cohort.true_beta):
            w.writerow([k + 1, *(repr(float(x)) for x in b)])
    write_matrix(cohort.S_star, os.path.join(out_dir, "s_star.csv"), ds.patient_ids)


def write_matrix(M, path, ids) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", *ids])
        for pid, row in zip(ids, np.asarray(M)):
            w.writerow([pid, *(repr(float(x)) for x in row)])


def read_truth_clusters(path) -> dict[str, int]:
    with open(path, newline="", encoding="utf-8") as fh:
        return {r["patient_id"]: int(r["cluster"]) for r in csv.DictReader(fh)}
