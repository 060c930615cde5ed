"""Command-line entry points: simulate, fit, evaluate, gridsearch, benchmark."""
from __future__ import annotations

import argparse
import csv
import os
import sys
import time
import warnings

import numpy as np

from . import evaluation as ev
from . import optimizer as opt
from . import simulation as sim
from .dataset import (
    MultiStateDataset,
    PreprocessReport,
    apply_standardization,
    preprocess,
    read_dataset,
)
from .errors import TrajclustError, ValidationError


class UsageError(Exception):
    """Bad command-line input or unparseable config; exits with status 2."""


# ---------------------------------------------------------------------------
# small I/O helpers
# ---------------------------------------------------------------------------

def _writer(path):
    fh = open(path, "w", newline="", encoding="utf-8")
    return fh, csv.writer(fh, lineterminator="\n")


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_table(path, header, rows) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _parse(fn, *args):
    try:
        return fn(*args)
    except (ValidationError, OSError) as exc:
        raise UsageError(str(exc)) from None


def _load_truth(data_dir, ds: MultiStateDataset):
    path = os.path.join(data_dir, "truth_clusters.csv")
    if not os.path.exists(path):
        return None
    truth = sim.read_truth_clusters(path)
    return np.array([truth[p] for p in ds.patient_ids])


def write_standardization(report: PreprocessReport, path) -> None:
    write_table(path, ["feature", "mean", "sd"], [(f, m, s) for f, (m, s) in report.standardization.items()])


def read_standardization(path) -> PreprocessReport:
    rep = PreprocessReport()
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            rep.standardization[r["feature"]] = (float(r["mean"]), float(r["sd"]))
    return rep


def write_beta(ds, beta, path) -> None:
    rows = []
    for k, b in enumerate(beta):
        for name, v in zip(ds.transition_features(k), b):
            rows.append((k + 1, name, float(v)))
    write_table(path, ["transition_id", "feature", "beta"], rows)


def read_beta(ds, path) -> list[np.ndarray]:
    vals = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            vals[(int(r["transition_id"]) - 1, r["feature"])] = float(r["beta"])
    try:
        return [np.array([vals[(k, f)] for f in ds.transition_features(k)]) for k in range(ds.K)]
    except KeyError as exc:
        raise ValidationError(f"beta file lacks coefficient {exc}") from None


def write_curves(ds, labels, out_dir) -> None:
    """KM survival and transition-probability curves per cluster and transition."""
    curves = []
    for k in range(ds.K):
        rows = ds.at_risk[:, k]
        for g in np.unique(labels[rows]):
            sel = rows & (labels == g)
            curves.append((k, ev.kaplan_meier(ds.times[sel, k], ds.events[sel, k], group=int(g))))
    ev.write_curves(curves, os.path.join(out_dir, "km_curves.csv"))
    ev.write_curves(curves, os.path.join(out_dir, "transition_probability.csv"), probability=True)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_simulate(config_path, out_dir, seed=None) -> int:
    cfg = _parse(sim.read_config, config_path) if config_path else sim.SimulationConfig()
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", sim.TuningWarning)
        cohort = sim.generate(cfg)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    sim.write_cohort(cohort, out_dir)
    extra = {"q_used": cohort.q_used, "achieved_censoring": cohort.censoring_rate,
             "achieved_gap": sim.similarity_gap(cohort.S_star, cohort.true_clusters),
             "tuning_flagged": cohort.tuning_flagged}
    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(sim.format_config(cohort.config, extra))
    return 0


def cmd_fit(data_dir, hyperparams_path, out_dir, emit_similarity=False, seed=0, raw=False) -> int:
    hp = _parse(opt.read_hyperparams, hyperparams_path) if hyperparams_path else opt.Hyperparams()
    ds = read_dataset(data_dir)
    os.makedirs(out_dir, exist_ok=True)
    if raw:
        rep = PreprocessReport(standardization={f: (0.0, 1.0) for f in ds.feature_names})
    else:
        ds, rep = preprocess(ds)
    write_standardization(rep, os.path.join(out_dir, "standardization.csv"))
    write_table(os.path.join(out_dir, "dropped_features.csv"), ["feature", "reason"], rep.dropped_features)
    res = opt.fit(ds, hp, seed=seed)
    labels = res.labels
    write_table(os.path.join(out_dir, "clusters.csv"), ["patient_id", "cluster"], zip(ds.patient_ids, labels))
    write_beta(ds, res.beta, os.path.join(out_dir, "beta.csv"))
    write_table(os.path.join(out_dir, "weights.csv"), ["transition_id", "weight"],
                [(k + 1, w) for k, w in enumerate(res.weights)])
    write_table(os.path.join(out_dir, "objective_trace.csv"), ["iteration", "objective"], enumerate(res.objective_trace))
    write_table(os.path.join(out_dir, "step_log.csv"), ["iteration", "step", "before", "after"], res.step_log)
    opt.write_hyperparams(hp, os.path.join(out_dir, "hyperparams.txt"))
    if emit_similarity:
        sim.write_matrix(res.S.S, os.path.join(out_dir, "S.csv"), ds.patient_ids)
        from .graph import build_laplacian

        sim.write_matrix(build_laplacian(res.S.S).L, os.path.join(out_dir, "L.csv"), ds.patient_ids)
    truth = _load_truth(data_dir, ds)
    rep_eval = ev.evaluate(ds, res.beta, labels, res.S.S, truth)
    metrics = rep_eval.as_dict()
    metrics.update(converged=res.converged, iterations=res.iterations, objective=res.objective,
                   cluster_method=res.clusters.method)
    ev.write_metrics(metrics, os.path.join(out_dir, "metrics.txt"))
    write_curves(ds, labels, out_dir)
    return 0


def cmd_evaluate(data_dir, fit_dir, out_dir) -> int:
    """Score a saved fit on a (possibly held-out) dataset."""
    ds = read_dataset(data_dir)
    ds = apply_standardization(ds, read_standardization(os.path.join(fit_dir, "standardization.csv")))
    beta = read_beta(ds, os.path.join(fit_dir, "beta.csv"))
    os.makedirs(out_dir, exist_ok=True)
    labels = None
    clusters_path = os.path.join(fit_dir, "clusters.csv")
    if os.path.exists(clusters_path):
        with open(clusters_path, newline="", encoding="utf-8") as fh:
            fitted = {r["patient_id"]: int(r["cluster"]) for r in csv.DictReader(fh)}
        if all(p in fitted for p in ds.patient_ids):
            labels = np.array([fitted[p] for p in ds.patient_ids])
    truth = _load_truth(data_dir, ds)
    report = ev.evaluate(ds, beta, labels, None, truth)
    ev.write_metrics(report.as_dict(), os.path.join(out_dir, "metrics.txt"))
    if labels is not None:
        write_curves(ds, labels, out_dir)
    return 0


def cmd_gridsearch(data_dir, grid_csv, out_dir, transition=1, validation_dir=None) -> int:
    grid = _parse(opt.read_grid, grid_csv)
    if not grid:
        raise UsageError("grid is empty")
    ds, rep = preprocess(read_dataset(data_dir))
    val = None
    if validation_dir:
        val = apply_standardization(read_dataset(validation_dir), rep)
    res = opt.grid_search(ds, grid, transition, eval_ds=val)
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for i, c in enumerate(res.candidates):
        hp = c.hp
        kl = hp.kappa if hp.kappa is not None else hp.lam
        rows.append((i, hp.eta, hp.gamma, hp.mu, kl, hp.alpha_spec, hp.c, c.c_index, c.logrank_p,
                     c.summary["nnz"], c.summary["iterations"], c.summary["converged"]))
    write_table(os.path.join(out_dir, "candidates.csv"),
                ["index", "eta", "gamma", "mu", "kappa_or_lambda", "alpha", "c", "c_index", "logrank_p",
                 "nnz", "iterations", "converged"], rows)
    with open(os.path.join(out_dir, "selected.txt"), "w", encoding="utf-8") as fh:
        fh.write("NONE\n" if res.selected is None else f"{res.selected} {res.best.hp.label()}\n")
    return 0


def cmd_benchmark(plan_path, out_dir, threads=1, seed=0, config_path=None, hyperparams_path=None) -> int:
    from . import benchmark

    cfg = _parse(sim.read_config, config_path) if config_path else sim.SimulationConfig()
    hp = _parse(opt.read_hyperparams, hyperparams_path) if hyperparams_path else benchmark.DEFAULT_HP
    plan = _parse(benchmark.read_plan, plan_path)
    ok = benchmark.run_plan(plan, cfg, hp, out_dir, threads=threads, seed=seed)
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--threads", type=int, default=1, help="worker processes (benchmark)")
    common.add_argument("--emit-similarity", action="store_true", help="also write S.csv and L.csv")

    p = argparse.ArgumentParser(prog="trajclust", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="generate a synthetic cohort")
    s.add_argument("config", nargs="?", help="key=value simulation config (defaults when omitted)")

    f = sub.add_parser("fit", parents=[common], help="fit the joint model")
    f.add_argument("data", help="dataset directory")
    f.add_argument("hyperparams", nargs="?", help="key=value hyperparameter file")
    f.add_argument("--raw", action="store_true", help="skip standardization and correlation filtering")

    e = sub.add_parser("evaluate", parents=[common], help="score a saved fit on a dataset")
    e.add_argument("data", help="dataset directory")
    e.add_argument("fit_dir", help="output directory of a previous fit")

    g = sub.add_parser("gridsearch", parents=[common], help="select hyperparameters")
    g.add_argument("data", help="dataset directory")
    g.add_argument("grid", help="grid CSV (eta, gamma, mu, kappa_or_lambda, alpha, c)")
    g.add_argument("--transition", type=int, default=1, help="1-based transition for the C-index")
    g.add_argument("--validation", help="dataset directory used for the C-index")

    b = sub.add_parser("benchmark", parents=[common], help="run an experiment plan")
    b.add_argument("plan", help="plan CSV")
    b.add_argument("--config", help="base simulation config")
    b.add_argument("--hyperparams", help="hyperparameters of the full model")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "simulate":
            return cmd_simulate(args.config, args.out, args.seed)
        if args.command == "fit":
            return cmd_fit(args.data, args.hyperparams, args.out, args.emit_similarity, args.seed or 0, args.raw)
        if args.command == "evaluate":
            return cmd_evaluate(args.data, args.fit_dir, args.out)
        if args.command == "gridsearch":
            return cmd_gridsearch(args.data, args.grid, args.out, args.transition, args.validation)
        if args.command == "benchmark":
            return cmd_benchmark(args.plan, args.out, args.threads, args.seed or 0, args.config, args.hyperparams)
    except UsageError as exc:
        print(f"trajclust {args.command}: {exc}", file=sys.stderr)
        return 2
    except (TrajclustError, OSError) as exc:
        print(f"trajclust {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
