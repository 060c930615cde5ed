"""Clock-reset multi-state cohorts: data model, CSV I/O and preprocessing.

A cohort is stored as a global covariate matrix ``X`` (one column per unique
covariate) plus, for every transition ``k``, the subset of columns that enter
that transition's Cox model, the clock-reset sojourn times, event indicators
and an at-risk mask.

Transition indices are 0-based in the Python API and 1-based in files.
"""
from __future__ import annotations

import csv
import os
import warnings
from dataclasses import InitVar, dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import EmptyFeatureError, JoinError, SchemaError, ValidationError

COVARIATES_FILE = "covariates.csv"
TRANSITIONS_FILE = "transitions.csv"
SPEC_FILE = "transition_spec.csv"


@dataclass(frozen=True)
class TransitionSpec:
    """Ordered transitions of a forward (acyclic) multi-state model.

    Parameters
    ----------
    transitions : sequence of (from_state, to_state)
        Transition ``k`` is ``transitions[k]``.
    absorbing : optional set of states
        Defaults to every state without outgoing transitions. Supplying it
        only serves as a consistency check.
    """

    transitions: tuple[tuple[int, int], ...]
    absorbing: frozenset[int] | None = None

    def __post_init__(self):
        trans = tuple((int(a), int(b)) for a, b in self.transitions)
        object.__setattr__(self, "transitions", trans)
        if len(trans) < 1:
            raise ValidationError("a TransitionSpec needs at least one transition")
        if len(set(trans)) != len(trans):
            raise ValidationError("duplicated transition in spec")
        for a, b in trans:
            if a == b:
                raise ValidationError(f"self-transition {a}->{b} is not allowed")
        sinks = frozenset(s for s in self.states if not self.outgoing(s))
        if self.absorbing is None:
            object.__setattr__(self, "absorbing", sinks)
        else:
            absorbing = frozenset(int(s) for s in self.absorbing)
            bad = [s for s in absorbing if self.outgoing(s)]
            if bad:
                raise ValidationError(f"absorbing states with outgoing transitions: {bad}")
            object.__setattr__(self, "absorbing", absorbing)
        self._check_acyclic()
        if len(self.initial_states) != 1:
            raise ValidationError(
                f"expected exactly one initial state, found {sorted(self.initial_states)}"
            )

    @classmethod
    def chain(cls, n_transitions: int) -> "TransitionSpec":
        """Illness-death style chain ``0 -> 1 -> ... -> n_transitions``."""
        return cls(tuple((k, k + 1) for k in range(n_transitions)))

    @property
    def K(self) -> int:
        return len(self.transitions)

    @property
    def states(self) -> frozenset[int]:
        return frozenset(s for t in self.transitions for s in t)

    @property
    def initial_states(self) -> frozenset[int]:
        targets = {b for _, b in self.transitions}
        return frozenset(s for s in self.states if s not in targets)

    @property
    def initial(self) -> int:
        return next(iter(self.initial_states))

    def outgoing(self, state: int) -> list[int]:
        return [k for k, (a, _) in enumerate(self.transitions) if a == state]

    def incoming(self, state: int) -> list[int]:
        return [k for k, (_, b) in enumerate(self.transitions) if b == state]

    def topological_order(self) -> list[int]:
        """Transition indices ordered so that upstream transitions come first."""
        order = []
        pending = list(range(self.K))
        while pending:
            progressed = False
            for k in list(pending):
                origin = self.transitions[k][0]
                if all(j in order for j in self.incoming(origin)):
                    order.append(k)
                    pending.remove(k)
                    progressed = True
            if not progressed:  # pragma: no cover - guarded by _check_acyclic
                raise ValidationError("transition graph has a cycle")
        return order

    def _check_acyclic(self):
        indeg = {s: 0 for s in self.states}
        for _, b in self.transitions:
            indeg[b] += 1
        queue = [s for s, d in indeg.items() if d == 0]
        seen = 0
        while queue:
            s = queue.pop()
            seen += 1
            for k in self.outgoing(s):
                b = self.transitions[k][1]
                indeg[b] -= 1
                if indeg[b] == 0:
                    queue.append(b)
        if seen != len(indeg):
            raise ValidationError("transition graph is not a DAG")


def infer_at_risk(spec: TransitionSpec, events: np.ndarray) -> np.ndarray:
    """At-risk mask implied by the observed events.

    A patient is at risk for transition ``k`` when ``k`` leaves the initial
    state, or when the patient was observed to enter ``k``'s origin state.
    """
    n = events.shape[0]
    at_risk = np.zeros((n, spec.K), dtype=bool)
    for k in spec.topological_order():
        origin = spec.transitions[k][0]
        if origin == spec.initial:
            at_risk[:, k] = True
        else:
            entered = np.zeros(n, dtype=bool)
            for j in spec.incoming(origin):
                entered |= at_risk[:, j] & (events[:, j] == 1)
            at_risk[:, k] = entered
    return at_risk


@dataclass
class MultiStateDataset:
    """Multi-state cohort with per-transition covariate subsets.

    Attributes
    ----------
    spec : TransitionSpec
    patient_ids : (n,) array of str
    X : (n, p) float array
        Global, deduplicated covariate matrix.
    feature_names : tuple of str
        Column names of ``X``.
    feature_index : tuple of int arrays
        ``X[:, feature_index[k]]`` is the covariate matrix of transition ``k``.
    times, events : (n, K) arrays
        Clock-reset sojourn times and event indicators. Entries where the
        patient is not at risk are stored as 0.
    at_risk : (n, K) bool array
    """

    spec: TransitionSpec
    patient_ids: np.ndarray
    X: np.ndarray
    feature_names: tuple[str, ...]
    feature_index: tuple[np.ndarray, ...]
    times: np.ndarray
    events: np.ndarray
    at_risk: np.ndarray | None = None
    _check: InitVar[bool] = True

    def __post_init__(self, _check=True):
        self.patient_ids = np.asarray(self.patient_ids).astype(str)
        self.X = np.asarray(self.X, dtype=float)
        self.feature_names = tuple(str(f) for f in self.feature_names)
        self.feature_index = tuple(np.asarray(ix, dtype=np.intp) for ix in self.feature_index)
        self.times = np.asarray(self.times, dtype=float)
        self.events = np.asarray(self.events).astype(np.int8)
        if self.at_risk is None:
            self.at_risk = infer_at_risk(self.spec, self.events)
        else:
            self.at_risk = np.asarray(self.at_risk, dtype=bool)
        if _check:
            self.validate()

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def K(self) -> int:
        return self.spec.K

    def Xk(self, k: int) -> np.ndarray:
        return self.X[:, self.feature_index[k]]

    def transition_features(self, k: int) -> list[str]:
        return [self.feature_names[j] for j in self.feature_index[k]]

    def n_events(self, k: int) -> int:
        return int(self.events[:, k].sum())

    def validate(self):
        n, K = self.X.shape[0], self.spec.K
        if self.X.ndim != 2:
            raise ValidationError("X must be 2-D")
        if len(self.patient_ids) != n:
            raise ValidationError("patient_ids length does not match X")
        if len(set(self.patient_ids)) != n:
            raise SchemaError("duplicate patient_id")
        if len(self.feature_names) != self.X.shape[1]:
            raise ValidationError("feature_names length does not match X")
        if len(set(self.feature_names)) != len(self.feature_names):
            raise SchemaError("duplicated covariate names in X")
        if len(self.feature_index) != K:
            raise ValidationError("need one feature index per transition")
        used = set()
        for ix in self.feature_index:
            if ix.size and (ix.min() < 0 or ix.max() >= self.X.shape[1]):
                raise ValidationError("feature index out of range")
            used.update(ix.tolist())
        if len(used) != self.X.shape[1]:
            raise ValidationError("every column of X must enter at least one transition")
        for name, arr in (("times", self.times), ("events", self.events), ("at_risk", self.at_risk)):
            if arr.shape != (n, K):
                raise ValidationError(f"{name} must have shape (n, K) = {(n, K)}")
        if not np.all(np.isfinite(self.X)):
            raise ValidationError("X contains NaN or infinite values")
        if not np.all(np.isfinite(self.times)) or np.any(self.times < 0):
            raise ValidationError("times must be finite and nonnegative")
        if not np.isin(self.events, (0, 1)).all():
            raise ValidationError("events must be 0/1")
        if np.any((self.events == 1) & ~self.at_risk):
            raise ValidationError("event recorded for a patient not at risk")
        if np.any((self.events == 1) & (self.times <= 0)):
            raise ValidationError("an observed transition needs a positive time")
        expected = infer_at_risk(self.spec, self.events)
        if not np.array_equal(expected, self.at_risk):
            raise ValidationError("at_risk mask is inconsistent with the transition DAG")
        for state in self.spec.states:
            out = self.spec.outgoing(state)
            if len(out) > 1 and np.any(self.events[:, out].sum(axis=1) > 1):
                raise ValidationError(f"patient leaves state {state} more than once")

    def with_columns(self, keep: Sequence[int], X: np.ndarray | None = None) -> "MultiStateDataset":
        """Dataset restricted to the given columns of ``X`` (optionally replaced)."""
        keep = np.asarray(keep, dtype=np.intp)
        remap = -np.ones(self.p, dtype=np.intp)
        remap[keep] = np.arange(keep.size)
        new_index = tuple(remap[ix][remap[ix] >= 0] for ix in self.feature_index)
        Xnew = self.X[:, keep] if X is None else X
        return replace(
            self,
            X=Xnew,
            feature_names=tuple(self.feature_names[j] for j in keep),
            feature_index=new_index,
        )

    def subset(self, rows: Sequence[int] | np.ndarray) -> "MultiStateDataset":
        """Dataset restricted to a subset of patients."""
        rows = np.asarray(rows)
        return replace(
            self,
            patient_ids=self.patient_ids[rows],
            X=self.X[rows],
            times=self.times[rows],
            events=self.events[rows],
            at_risk=self.at_risk[rows],
        )

    def equals(self, other: "MultiStateDataset") -> bool:
        """Field-for-field equality (floats compared bit-exactly)."""
        return (
            self.spec == other.spec
            and np.array_equal(self.patient_ids, other.patient_ids)
            and self.feature_names == other.feature_names
            and len(self.feature_index) == len(other.feature_index)
            and all(np.array_equal(a, b) for a, b in zip(self.feature_index, other.feature_index))
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.events, other.events)
            and np.array_equal(self.at_risk, other.at_risk)
        )


@dataclass
class PreprocessReport:
    dropped_features: list[tuple[str, str]] = field(default_factory=list)
    standardization: dict[str, tuple[float, float]] = field(default_factory=dict)

    def merge(self, other: "PreprocessReport") -> "PreprocessReport":
        return PreprocessReport(
            self.dropped_features + other.dropped_features,
            {**self.standardization, **other.standardization},
        )


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------

def _read_rows(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, header row required") from None
        rows = [r for r in reader if r]
    header = [h.strip() for h in header]
    for i, r in enumerate(rows):
        if len(r) != len(header):
            raise SchemaError(f"{path}: row {i + 2} has {len(r)} fields, expected {len(header)}")
    return header, rows


def _parse_float(s: str, what: str) -> float:
    s = s.strip()
    if s == "" or s.lower() in ("na", "nan", "null"):
        return float("nan")
    try:
        return float(s)
    except ValueError:
        raise ValidationError(f"non-numeric value {s!r} in {what}") from None


def load_dataset(
    covariates_csv,
    transitions_csv,
    spec: TransitionSpec,
    features: dict[int, Sequence[str]] | None = None,
) -> MultiStateDataset:
    """Read a cohort from a wide covariate file and a long transition file.

    Parameters
    ----------
    covariates_csv : path
        Columns ``patient_id`` followed by numeric covariates.
    transitions_csv : path
        Columns ``patient_id, transition_id, time, status`` with 1-based
        transition ids. Rows are only required for transitions a patient is
        at risk of.
    spec : TransitionSpec
    features : dict, optional
        Maps 0-based transition index to the covariate names of that
        transition. Transitions not listed use every covariate.

    Patients with a missing covariate value are excluded (with a warning),
    never imputed.
    """
    header, rows = _read_rows(covariates_csv)
    if not header or header[0] != "patient_id":
        raise SchemaError("covariates file must start with a 'patient_id' column")
    names = header[1:]
    if len(set(names)) != len(names):
        raise SchemaError("duplicated covariate column names")
    ids = [r[0].strip() for r in rows]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise SchemaError(f"duplicate patient_id in covariates: {dup[:5]}")
    X = np.array([[_parse_float(v, f"covariate of {r[0]}") for v in r[1:]] for r in rows], dtype=float)
    X = X.reshape(len(rows), len(names))
    missing = ~np.isfinite(X).all(axis=1)
    if missing.any():
        warnings.warn(f"excluding {int(missing.sum())} patients with missing covariates")
    keep_rows = np.flatnonzero(~missing)
    excluded = {ids[i] for i in np.flatnonzero(missing)}
    ids = [ids[i] for i in keep_rows]
    X = X[keep_rows]
    pos = {pid: i for i, pid in enumerate(ids)}

    theader, trows = _read_rows(transitions_csv)
    required = ["patient_id", "transition_id", "time", "status"]
    if theader[:4] != required:
        raise SchemaError(f"transitions file header must be {required}")
    n, K = len(ids), spec.K
    times = np.zeros((n, K))
    events = np.zeros((n, K), dtype=np.int8)
    seen = np.zeros((n, K), dtype=bool)
    for lineno, r in enumerate(trows, start=2):
        pid = r[0].strip()
        if pid in excluded:
            continue
        if pid not in pos:
            raise JoinError(f"patient {pid!r} in transitions has no covariate row")
        try:
            tid = int(r[1])
        except ValueError:
            raise ValidationError(f"line {lineno}: transition_id must be an integer") from None
        if not 1 <= tid <= K:
            raise ValidationError(f"line {lineno}: transition_id {tid} not in 1..{K}")
        t = _parse_float(r[2], "time")
        if not np.isfinite(t) or t < 0:
            raise ValidationError(f"line {lineno}: time must be a nonnegative number, got {r[2]!r}")
        try:
            status = int(r[3])
        except ValueError:
            raise ValidationError(f"line {lineno}: status must be 0 or 1, got {r[3]!r}") from None
        if status not in (0, 1):
            raise ValidationError(f"line {lineno}: status must be 0 or 1, got {status}")
        i, k = pos[pid], tid - 1
        if seen[i, k]:
            raise SchemaError(f"line {lineno}: duplicate record for patient {pid!r}, transition {tid}")
        seen[i, k] = True
        times[i, k] = t
        events[i, k] = status

    at_risk = infer_at_risk(spec, events)
    stray = seen & ~at_risk
    if np.any(events.astype(bool) & ~at_risk):
        i, k = np.argwhere(events.astype(bool) & ~at_risk)[0]
        raise ValidationError(
            f"patient {ids[i]!r} has an event on transition {k + 1} without entering its origin state"
        )
    # records for transitions the patient never entered carry no information
    times[stray] = 0.0
    absent = at_risk & ~seen
    if absent.any():
        i, k = np.argwhere(absent)[0]
        raise ValidationError(f"patient {ids[i]!r} is at risk for transition {k + 1} but has no record")

    if features is None:
        features = {}
    name_pos = {nm: j for j, nm in enumerate(names)}
    index = []
    for k in range(K):
        cols = features.get(k, names)
        try:
            index.append(np.array([name_pos[c] for c in cols], dtype=np.intp))
        except KeyError as exc:
            raise SchemaError(f"transition {k + 1} uses unknown covariate {exc.args[0]!r}") from None
    ds = MultiStateDataset(
        spec=spec,
        patient_ids=np.array(ids, dtype=str),
        X=X,
        feature_names=tuple(names),
        feature_index=tuple(index),
        times=times,
        events=events,
        at_risk=at_risk,
        _check=False,
    )
    used = sorted(set(np.concatenate(index).tolist()))
    if len(used) < len(names):
        ds = ds.with_columns(used)
    ds.validate()
    return ds


def write_spec(spec: TransitionSpec, path, feature_lists: Sequence[Sequence[str]] | None = None):
    """Write the transition structure, one row per transition.

    The ``features`` column lists the covariates of each transition separated
    by ``;`` and is left empty when the transition uses every covariate.
    """
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["transition_id", "from_state", "to_state", "features"])
        for k, (a, b) in enumerate(spec.transitions):
            feats = "" if feature_lists is None or feature_lists[k] is None else ";".join(feature_lists[k])
            w.writerow([k + 1, a, b, feats])


def read_spec(path) -> tuple[TransitionSpec, dict[int, list[str]]]:
    header, rows = _read_rows(path)
    if header[:3] != ["transition_id", "from_state", "to_state"]:
        raise SchemaError("spec file header must start with transition_id,from_state,to_state")
    rows = sorted(rows, key=lambda r: int(r[0]))
    if [int(r[0]) for r in rows] != list(range(1, len(rows) + 1)):
        raise SchemaError("transition ids in transition_spec.csv must be 1..K")
    spec = TransitionSpec(tuple((int(r[1]), int(r[2])) for r in rows))
    features = {}
    if len(header) > 3:
        for k, r in enumerate(rows):
            if r[3].strip():
                features[k] = [f for f in r[3].split(";") if f]
    return spec, features


def write_dataset(ds: MultiStateDataset, out_dir) -> None:
    """Write ``covariates.csv``, ``transitions.csv`` and ``transition_spec.csv``.

    Floats are written with ``repr`` so that reading them back is bit-exact.
    """
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, COVARIATES_FILE), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", *ds.feature_names])
        for pid, row in zip(ds.patient_ids, ds.X):
            w.writerow([pid, *map(repr, row.tolist())])
    with open(os.path.join(out_dir, TRANSITIONS_FILE), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "transition_id", "time", "status"])
        for i, pid in enumerate(ds.patient_ids):
            for k in range(ds.K):
                if ds.at_risk[i, k]:
                    w.writerow([pid, k + 1, repr(float(ds.times[i, k])), int(ds.events[i, k])])
    feats = [
        None if len(ix) == ds.p and np.array_equal(ix, np.arange(ds.p)) else ds.transition_features(k)
        for k, ix in enumerate(ds.feature_index)
    ]
    write_spec(ds.spec, os.path.join(out_dir, SPEC_FILE), feats)


def read_dataset(data_dir) -> MultiStateDataset:
    """Inverse of :func:`write_dataset`."""
    spec, features = read_spec(os.path.join(data_dir, SPEC_FILE))
    return load_dataset(
        os.path.join(data_dir, COVARIATES_FILE),
        os.path.join(data_dir, TRANSITIONS_FILE),
        spec,
        features=features,
    )


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def standardize(ds: MultiStateDataset) -> tuple[MultiStateDataset, PreprocessReport]:
    """Z-score every covariate (sample sd, ``ddof=1``); drop constant columns."""
    if ds.n < 2:
        raise ValidationError("standardization needs at least two patients")
    mean = ds.X.mean(axis=0)
    sd = ds.X.std(axis=0, ddof=1)
    scale = np.maximum(1.0, np.abs(mean))
    constant = sd <= 1e-12 * scale
    report = PreprocessReport()
    for j in np.flatnonzero(constant):
        report.dropped_features.append((ds.feature_names[j], "zero-variance"))
    keep = np.flatnonzero(~constant)
    if keep.size == 0:
        raise EmptyFeatureError("every covariate has zero variance")
    Z = (ds.X[:, keep] - mean[keep]) / sd[keep]
    for j in keep:
        report.standardization[ds.feature_names[j]] = (float(mean[j]), float(sd[j]))
    return ds.with_columns(keep, Z), report


def apply_standardization(ds: MultiStateDataset, report: PreprocessReport) -> MultiStateDataset:
    """Apply the column selection and (mean, sd) of ``report`` to another dataset."""
    names = list(report.standardization)
    pos = {f: j for j, f in enumerate(ds.feature_names)}
    missing = [f for f in names if f not in pos]
    if missing:
        raise SchemaError(f"dataset lacks standardized features {missing}")
    keep = np.array([pos[f] for f in names], dtype=np.intp)
    mean = np.array([report.standardization[f][0] for f in names])
    sd = np.array([report.standardization[f][1] for f in names])
    return ds.with_columns(keep, (ds.X[:, keep] - mean) / sd)


def _correlation(X: np.ndarray, method: str) -> np.ndarray:
    if method == "spearman":
        from scipy.stats import rankdata

        X = np.apply_along_axis(rankdata, 0, X)
    elif method != "pearson":
        raise ValidationError(f"unknown correlation method {method!r}")
    Xc = X - X.mean(axis=0)
    norms = np.sqrt((Xc ** 2).sum(axis=0))
    norms[norms == 0] = np.inf
    R = (Xc.T @ Xc) / np.outer(norms, norms)
    return np.clip(R, -1.0, 1.0)


def _redundant_columns(X: np.ndarray, threshold: float, method: str) -> list[int]:
    R = np.abs(_correlation(X, method))
    kept: list[int] = []
    dropped: list[int] = []
    for j in range(X.shape[1]):
        if kept and np.any(R[j, kept] > threshold):
            dropped.append(j)
        else:
            kept.append(j)
    return dropped


def correlation_filter(
    ds: MultiStateDataset, threshold: float = 0.9, method: str = "pearson"
) -> tuple[MultiStateDataset, PreprocessReport]:
    """Greedy redundancy filter in column order.

    A column is dropped if its absolute correlation with an earlier retained
    column exceeds ``threshold``.
    """
    if not 0 < threshold <= 1:
        raise ValidationError("threshold must lie in (0, 1]")
    dropped = _redundant_columns(ds.X, threshold, method)
    report = PreprocessReport([(ds.feature_names[j], "correlated") for j in dropped])
    keep = [j for j in range(ds.p) if j not in set(dropped)]
    return ds.with_columns(keep), report


def paired_correlation_filter(
    ds_a: MultiStateDataset,
    ds_b: MultiStateDataset,
    threshold: float = 0.9,
    method: str = "pearson",
) -> tuple[MultiStateDataset, MultiStateDataset, PreprocessReport]:
    """Filter two views of the same covariates (e.g. two acquisition times).

    Only features found redundant in *both* views are removed, from both.
    """
    if ds_a.feature_names != ds_b.feature_names:
        raise SchemaError("paired datasets must share covariate names and order")
    if not 0 < threshold <= 1:
        raise ValidationError("threshold must lie in (0, 1]")
    both = sorted(
        set(_redundant_columns(ds_a.X, threshold, method))
        & set(_redundant_columns(ds_b.X, threshold, method))
    )
    keep = [j for j in range(ds_a.p) if j not in set(both)]
    report = PreprocessReport([(ds_a.feature_names[j], "correlated") for j in both])
    return ds_a.with_columns(keep), ds_b.with_columns(keep), report


def preprocess(
    ds: MultiStateDataset, threshold: float = 0.9, method: str = "pearson"
) -> tuple[MultiStateDataset, PreprocessReport]:
    """Standardize then drop redundant covariates."""
    ds, rep1 = standardize(ds)
    ds, rep2 = correlation_filter(ds, threshold, method)
    return ds, rep1.merge(rep2)
