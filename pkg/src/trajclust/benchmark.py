"""Experiment plans: simulation sweeps, ablations and runtime scaling.

A plan is a CSV with one row per experiment::

    dimension,values,replicates,variants
    n,250;500,30,full;cox_only;fixed_rbf_graph;knn_graph
    ablation,,10,
    runtime,100;200;400;800,3,

``dimension`` is a simulation setting (``n, p, K, C, censoring, tau``),
``ablation`` (the four configurations gamma=0, lambda=0, eta=0 and full) or
``runtime`` (full-model fit time over the listed cohort sizes). Each run
trains on one cohort and measures discrimination on an independent cohort
from the same population.
"""
from __future__ import annotations

import csv
import os
import sys
import time
import traceback
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import evaluation as ev
from . import optimizer as opt
from . import simulation as sim
from .dataset import apply_standardization, standardize
from .errors import ValidationError

DEFAULT_HP = opt.Hyperparams()
SWEEP_DIMENSIONS = {"n": "n", "p": "p", "K": "K", "C": "C", "censoring": "target_censoring", "tau": "tau"}
ABLATIONS = ("gamma=0", "lambda=0", "eta=0", "full")
METRICS = ("c_index", "td_auroc", "ari", "ami", "sparsity", "edge_auc", "logrank_p", "runtime_s", "peak_mem_mb")
NEAR_ZERO_LAMBDA = 1e-6


@dataclass
class ExperimentPlan:
    sweep_dimension: str
    values: list
    replicates: int = 30
    model_variants: tuple = ("full", "cox_only", "fixed_rbf_graph", "knn_graph")

    def __post_init__(self):
        if self.replicates < 1:
            raise ValidationError("replicates must be at least 1")
        if self.sweep_dimension not in (*SWEEP_DIMENSIONS, "ablation", "runtime"):
            raise ValidationError(f"unknown plan dimension {self.sweep_dimension!r}")
        if self.sweep_dimension != "ablation" and not self.values:
            raise ValidationError(f"plan row {self.sweep_dimension!r} has no values")
        bad = set(self.model_variants) - set(opt.VARIANTS)
        if bad:
            raise ValidationError(f"unknown model variants {sorted(bad)}")


def _number(text: str):
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        return float(text)


def read_plan(path) -> list[ExperimentPlan]:
    plans = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or "dimension" not in [f.strip() for f in reader.fieldnames]:
            raise ValidationError("plan file needs a 'dimension' column")
        for line, row in enumerate(reader, start=2):
            row = {k.strip(): (v or "").strip() for k, v in row.items() if k is not None}
            try:
                values = [_number(v) for v in row.get("values", "").split(";") if v.strip()]
                reps = int(row["replicates"]) if row.get("replicates") else 30
            except ValueError as exc:
                raise ValidationError(f"plan line {line}: {exc}") from None
            variants = tuple(v.strip() for v in row.get("variants", "").split(";") if v.strip())
            kw = {"model_variants": variants} if variants else {}
            plans.append(ExperimentPlan(row["dimension"], values, reps, **kw))
    if not plans:
        raise ValidationError("plan file has no rows")
    return plans


def peak_memory_mb() -> float:
    """Peak resident set size of this process (best effort)."""
    try:
        import resource
    except ImportError:
        return float("nan")
    rss = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    return rss / 2 ** 20 if sys.platform == "darwin" else rss / 1024.0


# ---------------------------------------------------------------------------
# single runs
# ---------------------------------------------------------------------------

def prepare_cohorts(cfg: sim.SimulationConfig):
    """Standardized training cohort and a held-out cohort on the same scale."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", sim.TuningWarning)
        train = sim.generate(cfg)
    test = sim.generate_companion(train)
    tr, rep = standardize(train.ds)
    te = apply_standardization(test.ds, rep)
    return train, tr, te


def score(res: opt.FitResult, train: sim.SimulatedCohort, tr, te) -> dict:
    labels = res.labels
    rep = ev.evaluate(tr, res.beta, labels, None if labels is None else res.S.S,
                      train.true_clusters if labels is not None else None, eval_ds=te)
    out = {
        "c_index": rep.mean_c_index,
        "td_auroc": rep.mean_td_auroc,
        "ari": rep.ari,
        "ami": rep.ami,
        "sparsity": float(np.mean(rep.sparsity_ratio)),
        "edge_auc": rep.edge_auc,
        "logrank_p": rep.logrank.p if rep.logrank is not None else float("nan"),
        "runtime_s": res.runtime_s,
        "peak_mem_mb": peak_memory_mb(),
        "iterations": res.iterations,
        "converged": res.converged,
    }
    return out


def ablation_hp(hp: opt.Hyperparams, name: str) -> opt.Hyperparams:
    if name == "gamma=0":
        return hp.replace(gamma=0.0)
    if name == "lambda=0":
        return hp.replace(lam=NEAR_ZERO_LAMBDA)
    if name == "eta=0":
        return hp.replace(eta=0.0)
    if name == "full":
        return hp
    raise ValidationError(f"unknown ablation {name!r}")


def _run_cell(task) -> list[dict]:
    """All variants on one cohort; failures are recorded, not raised."""
    dimension, value, rep, seed, cfg, hp, variants = task
    rows = []
    base = {"dimension": dimension, "value": value, "replicate": rep, "seed": seed}
    try:
        train, tr, te = prepare_cohorts(cfg)
    except Exception as exc:  # noqa: BLE001 - recorded per cell
        return [{**base, "variant": v, "status": f"error: {type(exc).__name__}: {exc}"} for v in variants]
    hp_cell = hp if hp.c <= tr.n - 1 else hp.replace(c=min(hp.c, tr.n - 1))
    if dimension == "C":
        hp_cell = hp_cell.replace(c=max(2, int(cfg.C)))
    for v in variants:
        row = {**base, "variant": v}
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                if dimension == "ablation":
                    res = opt.fit(tr, ablation_hp(hp_cell, v))
                elif dimension == "runtime":
                    t0 = time.perf_counter()
                    res = opt.fit(tr, hp_cell)
                    row["seconds"] = time.perf_counter() - t0
                else:
                    res = opt.baseline_fit(tr, v, hp_cell)
            row.update(score(res, train, tr, te))
            row["status"] = "ok"
        except Exception as exc:  # noqa: BLE001
            row["status"] = f"error: {type(exc).__name__}: {exc}"
            if os.environ.get("TRAJCLUST_DEBUG"):
                traceback.print_exc()
        rows.append(row)
    return rows


def plan_tasks(plan: ExperimentPlan, base: sim.SimulationConfig, hp: opt.Hyperparams, seed: int = 0):
    tasks = []
    if plan.sweep_dimension == "ablation":
        for r in range(plan.replicates):
            cfg = base.replace(seed=seed + r)
            tasks.append(("ablation", "", r, seed + r, cfg, hp, ABLATIONS))
        return tasks
    for value in plan.values:
        for r in range(plan.replicates):
            if plan.sweep_dimension == "runtime":
                cfg = base.replace(n=int(value), seed=seed + r)
                tasks.append(("runtime", value, r, seed + r, cfg, hp, ("full",)))
            else:
                field = SWEEP_DIMENSIONS[plan.sweep_dimension]
                cfg = base.replace(**{field: value, "seed": seed + r})
                tasks.append((plan.sweep_dimension, value, r, seed + r, cfg, hp, plan.model_variants))
    return tasks


def run_tasks(tasks, threads: int = 1) -> list[dict]:
    if threads > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(_run_cell, tasks))
    else:
        chunks = [_run_cell(t) for t in tasks]
    return [row for chunk in chunks for row in chunk]


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

def summarize(rows: list[dict], keys=("dimension", "value", "variant")) -> list[dict]:
    groups: dict = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r)
    out = []
    for key, grp in groups.items():
        ok = [r for r in grp if r.get("status") == "ok"]
        s = dict(zip(keys, key))
        s["replicates"] = len(grp)
        s["n_ok"] = len(ok)
        for m in METRICS:
            vals = np.array([r[m] for r in ok if np.isfinite(r.get(m, np.nan))], dtype=float)
            s[f"{m}_mean"] = float(vals.mean()) if vals.size else float("nan")
            s[f"{m}_sd"] = float(vals.std(ddof=1)) if vals.size > 1 else (0.0 if vals.size else float("nan"))
        out.append(s)
    return out


def loglog_slope(ns, seconds) -> float:
    """Least-squares slope of log(seconds) on log(n)."""
    x = np.log(np.asarray(ns, dtype=float))
    y = np.log(np.asarray(seconds, dtype=float))
    if x.size < 2 or np.ptp(x) == 0:
        raise ValidationError("need at least two distinct sizes for a slope")
    return float(np.polyfit(x, y, 1)[0])


def _write_dicts(path, rows, columns) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(float(r[c])) if isinstance(r.get(c), (float, np.floating)) else r.get(c, "")
                        for c in columns])


RUN_COLUMNS = ("dimension", "value", "variant", "replicate", "seed", "status", *METRICS, "iterations", "converged")
SUMMARY_COLUMNS = ("dimension", "value", "variant", "replicates", "n_ok",
                   *[f"{m}_{s}" for m in METRICS for s in ("mean", "sd")])


def run_plan(plans, base: sim.SimulationConfig, hp: opt.Hyperparams, out_dir, threads: int = 1, seed: int = 0) -> bool:
    """Execute every plan row and write the result tables.

    Returns False only when every run failed.
    """
    os.makedirs(out_dir, exist_ok=True)
    sweep_rows, ablation_rows, runtime_rows = [], [], []
    for plan in plans:
        rows = run_tasks(plan_tasks(plan, base, hp, seed), threads)
        if plan.sweep_dimension == "ablation":
            ablation_rows += rows
        elif plan.sweep_dimension == "runtime":
            runtime_rows += rows
        else:
            sweep_rows += rows
    all_rows = sweep_rows + ablation_rows + runtime_rows
    _write_dicts(os.path.join(out_dir, "runs.csv"), all_rows, RUN_COLUMNS)
    if sweep_rows:
        _write_dicts(os.path.join(out_dir, "summary.csv"), summarize(sweep_rows), SUMMARY_COLUMNS)
    if ablation_rows:
        abl = summarize(ablation_rows, keys=("variant",))
        for r in abl:
            r["configuration"] = r.pop("variant")
        _write_dicts(os.path.join(out_dir, "ablation.csv"), abl,
                     ("configuration", *SUMMARY_COLUMNS[3:]))
    if runtime_rows:
        ok = [r for r in runtime_rows if r.get("status") == "ok"]
        _write_dicts(os.path.join(out_dir, "runtime_scaling.csv"), runtime_rows,
                     ("value", "replicate", "seed", "status", "seconds", "iterations", "peak_mem_mb"))
        with open(os.path.join(out_dir, "runtime_slope.txt"), "w", encoding="utf-8") as fh:
            try:
                slope = loglog_slope([r["value"] for r in ok], [r["seconds"] for r in ok])
                fh.write(f"loglog_slope={slope!r}\npoints={len(ok)}\n")
            except ValidationError as exc:
                fh.write(f"loglog_slope=nan\nerror={exc}\n")
    return any(r.get("status") == "ok" for r in all_rows)
