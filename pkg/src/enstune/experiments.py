"""Seeded experiment orchestration: dataset assembly, per-experiment runners,
aggregation with SEM, and reproducible run manifests.

Every experiment writes three CSVs into its output directory: ``cells.csv``
(one row per evaluated cell and seed), ``aggregate.csv`` (seed means with
SEM) and ``plotdata.csv`` (long format for external plotting), plus
``manifest.json`` carrying the resolved config, plan references, fit results
and stop decisions. Re-running from a manifest reproduces the metric CSVs
byte for byte; wall clock lives only in the manifest.
"""

from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import calibration, metrics
from .batchensemble import GAUSSIAN, RANDOM_SIGN, be_train
from .config import ConfigError, ExperimentConfig, config_from_dict, config_to_dict
from .data import load_csv, make_blobs, make_spirals, train_test_split
from .netcore import softmax
from .splits import (
    DISJOINT,
    OVERLAPPING,
    SHARED,
    SplitPlan,
    joint_eval_sets,
    make_disjoint,
    make_overlapping,
    make_shared,
)
from .training import (
    INDIVIDUAL,
    JOINT,
    MONITOR_COLUMNS,
    NONE,
    OptimizerConfig,
    StoppingConfig,
    member_logits,
    member_probs,
    train_ensemble,
)
from .tuning import (
    HyperGrid,
    SweepConfig,
    SweepResult,
    optimality_gap,
    run_sweep,
    select_h,
)

WORKERS_ENV = "ENSTUNE_WORKERS"

ROW_COLUMNS = ["experiment", "variant", "wd", "split", "scope"] + metrics.CSV_COLUMNS
METRIC_NAMES = ["error_pct", "nll", "ece", "diversity", "entropy", "normalized_epochs"]
ENSEMBLE_SCOPE = "ensemble"
MEMBER_AVG_SCOPE = "member_avg"


def build_dataset(cfg: ExperimentConfig):
    """Generate or load the task, then carve off the fixed stratified test set."""
    task = cfg.task
    rng = np.random.default_rng(task.data_seed)
    if task.kind == "blobs":
        ds = make_blobs(task.n, task.classes, task.noise, rng, radius=task.radius,
                        label_noise=task.label_noise)
    elif task.kind == "spirals":
        ds = make_spirals(task.n, task.noise, rng)
    elif task.kind == "csv":
        ds = load_csv(task.path, task.label_col)
    else:
        raise ConfigError(f"unknown task kind {task.kind!r}")
    return train_test_split(ds, task.test_fraction, seed=task.data_seed)


def make_plan(strategy: str, n_total: int, val_pct: float, n_members: int,
              seed: int, labels) -> SplitPlan:
    if strategy == SHARED:
        plan = make_shared(n_total, val_pct, n_members, seed, labels)
    elif strategy == DISJOINT:
        plan = make_disjoint(n_total, val_pct, n_members, seed, labels)
    elif strategy == OVERLAPPING:
        plan = make_overlapping(n_total, n_members, seed, labels,
                                val_fraction=val_pct)
    else:
        raise ConfigError(f"unknown holdout strategy {strategy!r}")
    plan.validate()
    return plan


def plan_reference(plan: SplitPlan, val_pct: float) -> dict:
    return {"strategy": plan.strategy, "n_total": plan.n_total,
            "n_members": plan.n_members, "val_pct": val_pct,
            "rng_seed": plan.rng_seed}


def member_avg_record(prob_label_pairs, ece_bins: int = 15, **tags) -> metrics.MetricsRecord:
    """Average of per-member metrics; diversity is 0 for single members."""
    errs, nlls, eces, ents = [], [], [], []
    for probs, y in prob_label_pairs:
        errs.append(metrics.classification_error(probs, y))
        nlls.append(metrics.nll(probs, y))
        eces.append(metrics.ece(probs, y, n_bins=ece_bins))
        ents.append(metrics.entropy(probs).mean)
    return metrics.MetricsRecord(
        error_pct=float(np.mean(errs)), nll=float(np.mean(nlls)),
        ece=float(np.mean(eces)), diversity=0.0, entropy=float(np.mean(ents)),
        **tags)


def make_row(experiment: str, variant: str, wd, split: str, scope: str,
             record: metrics.MetricsRecord) -> list:
    wd_cell = "" if wd is None else wd
    return [experiment, variant, wd_cell, split, scope] + record.to_row()


class ExperimentError(RuntimeError):
    """One or more seeds failed; partial results were still written."""


# ---------------------------------------------------------------------------
# worker-pool plumbing: one job per seed, results merged in seed order

def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def _map_jobs(fn, jobs):
    """Run jobs, capturing failures: list of ("ok", payload) | ("error", msg)."""
    workers = _worker_count()
    outcomes = []
    if workers <= 1 or len(jobs) <= 1:
        for job in jobs:
            try:
                outcomes.append(("ok", fn(job)))
            except Exception as err:  # noqa: BLE001 - seed isolation is the point
                outcomes.append(("error", f"{type(err).__name__}: {err}"))
        return outcomes
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        futures = [pool.submit(fn, job) for job in jobs]
        for fut in futures:
            try:
                outcomes.append(("ok", fut.result()))
            except Exception as err:  # noqa: BLE001
                outcomes.append(("error", f"{type(err).__name__}: {err}"))
    return outcomes


def _run_seed_jobs(fn, jobs, seeds):
    payloads, failures = [], []
    for seed, (status, payload) in zip(seeds, _map_jobs(fn, jobs)):
        if status == "ok":
            payloads.append(payload)
        else:
            failures.append({"seed": seed, "error": payload})
    return payloads, failures


def _fixed_budget_stop(cfg: ExperimentConfig) -> StoppingConfig:
    return StoppingConfig(mode=NONE, patience=cfg.stopping.patience,
                          max_epochs=cfg.stopping.max_epochs,
                          batch_size=cfg.stopping.batch_size)


def _optimizer_config(cfg: ExperimentConfig, cosine: bool) -> OptimizerConfig:
    opt = cfg.optimizer
    return OptimizerConfig(kind=opt.kind, lr=opt.lr, weight_decay=opt.weight_decay,
                           momentum=opt.momentum, decay_bias=opt.decay_bias,
                           cosine_epochs=cfg.stopping.max_epochs if cosine else None)


# ---------------------------------------------------------------------------
# weight-decay sweep

def _sweep_seed_job(args):
    cfg_doc, dprime_parts, test_parts, seed = args
    cfg = config_from_dict(cfg_doc)
    dprime, test = _datasets_from_parts(dprime_parts, test_parts)
    grid = HyperGrid(cfg.experiment.weight_decays, cfg.ensemble_sizes(), [seed])
    sweep_cfg = SweepConfig(hidden=cfg.model.hidden, n_members=cfg.ensemble.members,
                            val_fraction=cfg.ensemble.val_pct,
                            epochs=cfg.stopping.max_epochs,
                            batch_size=cfg.stopping.batch_size,
                            lr=cfg.optimizer.lr, momentum=cfg.optimizer.momentum,
                            optimizer=cfg.optimizer.kind,
                            ece_bins=cfg.experiment.ece_bins)
    return run_sweep(dprime, test, grid, sweep_cfg).cells


def _datasets_from_parts(dprime_parts, test_parts):
    from .data import Dataset
    return (Dataset(*dprime_parts), Dataset(*test_parts))


def _dataset_parts(ds):
    return (ds.x, ds.y, ds.n_classes)


def _run_wd_sweep(cfg: ExperimentConfig, dprime, test):
    jobs = [(config_to_dict(cfg), _dataset_parts(dprime), _dataset_parts(test), s)
            for s in cfg.experiment.seeds]
    chunks, failures = _run_seed_jobs(_sweep_seed_job, jobs, cfg.experiment.seeds)
    cells = [c for chunk in chunks for c in chunk]
    if not cells:
        raise ExperimentError("every sweep seed failed; nothing to select from")
    completed = sorted({c.seed for c in cells})
    grid = HyperGrid(cfg.experiment.weight_decays, cfg.ensemble_sizes(), completed)
    sweep = SweepResult(grid, cells, cfg.ensemble.val_pct)
    h_ind = select_h(sweep, "individual")
    h_ens = select_h(sweep, "ensemble")
    gap, gap_sem = optimality_gap(sweep, h_ind, h_ens)
    rows = []
    for cell in cells:
        if cell.diverged:
            continue
        for k in grid.ensemble_sizes:
            rows.append(make_row("wd_sweep", "", cell.wd, "val", ENSEMBLE_SCOPE,
                                 cell.val_records[k]))
            rows.append(make_row("wd_sweep", "", cell.wd, "test", ENSEMBLE_SCOPE,
                                 cell.test_records[k]))
    summary = {"h_ind": h_ind, "h_ens": h_ens, "gap": gap, "gap_sem": gap_sem}
    runs = [{"wd": c.wd, "seed": c.seed, "diverged": c.diverged,
             "member_val_nlls": c.member_val_nlls} for c in cells]
    return rows, runs, summary, failures


# ---------------------------------------------------------------------------
# temperature scaling

def _temp_modes_valid(cfg: ExperimentConfig) -> None:
    joint_like = {"joint", "pool"} & set(cfg.experiment.modes)
    if joint_like and DISJOINT in cfg.experiment.strategies:
        raise ConfigError(
            f"modes {sorted(joint_like)} need a jointly evaluable holdout; "
            "the disjoint strategy precludes joint evaluation")


def _pool_objective(eval_sets):
    frozen = [([softmax(np.asarray(z, dtype=np.float64)) for z in zs], np.asarray(y))
              for zs, y in eval_sets]

    def objective(t):
        vals = []
        for probs, y in frozen:
            mean_p = metrics.ensemble_mean(probs)
            vals.append(metrics.nll(calibration.pool_apply_temperature(mean_p, t), y))
        return float(np.mean(vals))

    return objective


def _temp_scale_seed_job(args):
    cfg_doc, dprime_parts, test_parts, seed = args
    cfg = config_from_dict(cfg_doc)
    dprime, test = _datasets_from_parts(dprime_parts, test_parts)
    dims = [dprime.x.shape[1]] + list(cfg.model.hidden) + [dprime.n_classes]
    m_total = cfg.ensemble.members
    opt = _optimizer_config(cfg, cosine=cfg.optimizer.kind == "sgd_momentum")
    stop = _fixed_budget_stop(cfg)
    ece_bins = cfg.experiment.ece_bins
    rows, run_entries = [], []
    for strategy in cfg.experiment.strategies:
        for val_pct in cfg.val_pcts():
            plan = make_plan(strategy, len(dprime), val_pct, m_total, seed, dprime.y)
            result = train_ensemble(dprime.x, dprime.y, plan, dims, opt, stop, seed)
            test_logits = [member_logits(m, test.x) for m in result.members]
            test_probs = [softmax(z) for z in test_logits]
            tags = dict(strategy=strategy, val_pct=val_pct, seed=seed,
                        ensemble_size=m_total)
            entry = {"strategy": strategy, "val_pct": val_pct, "seed": seed,
                     "plan": plan_reference(plan, val_pct), "fits": []}
            for mode in cfg.experiment.modes:
                if mode == "none":
                    ens_probs = test_probs
                elif mode == "individual":
                    member_vals = [(member_logits(mem, dprime.x[ms.val_idx]),
                                    dprime.y[ms.val_idx])
                                   for mem, ms in zip(result.members, plan.members)]
                    fit = calibration.calibrate_individual(member_vals)
                    ens_probs = [calibration.apply_temperature(z, t)
                                 for z, t in zip(test_logits, fit.temperature)]
                elif mode == "joint":
                    eval_sets = [([member_logits(result.members[m], dprime.x[idx])
                                   for m in ids], dprime.y[idx])
                                 for ids, idx in joint_eval_sets(plan)]
                    fit = calibration.calibrate_joint(eval_sets)
                    ens_probs = [calibration.apply_temperature(z, fit.temperature)
                                 for z in test_logits]
                elif mode == "pool":
                    eval_sets = [([member_logits(result.members[m], dprime.x[idx])
                                   for m in ids], dprime.y[idx])
                                 for ids, idx in joint_eval_sets(plan)]
                    fit = calibration.fit_temperature(_pool_objective(eval_sets),
                                                      mode="pool")
                    mean_test = metrics.ensemble_mean(test_probs)
                    pooled = calibration.pool_apply_temperature(mean_test,
                                                                fit.temperature)
                    rec = metrics.MetricsRecord(
                        error_pct=metrics.classification_error(pooled, test.y),
                        nll=metrics.nll(pooled, test.y),
                        ece=metrics.ece(pooled, test.y, n_bins=ece_bins),
                        diversity=metrics.diversity(test_probs).mean,
                        entropy=metrics.entropy(pooled).mean, **tags)
                    rows.append(make_row("temp_scale", mode, None, "test",
                                         ENSEMBLE_SCOPE, rec))
                    entry["fits"].append(_fit_to_dict(fit))
                    continue
                else:
                    raise ConfigError(f"unknown temperature mode {mode!r}")
                if mode != "none":
                    entry["fits"].append(_fit_to_dict(fit))
                rec = metrics.compute_record(ens_probs, test.y, ece_bins=ece_bins,
                                             **tags)
                rows.append(make_row("temp_scale", mode, None, "test",
                                     ENSEMBLE_SCOPE, rec))
                avg = member_avg_record([(p, test.y) for p in ens_probs],
                                        ece_bins=ece_bins, **tags)
                rows.append(make_row("temp_scale", mode, None, "test",
                                     MEMBER_AVG_SCOPE, avg))
            run_entries.append(entry)
    return rows, run_entries


def _fit_to_dict(fit: calibration.TempFitResult) -> dict:
    return {"mode": fit.mode, "T": fit.temperature, "val_nll": fit.val_nll,
            "iterations": fit.iterations, "converged": fit.converged,
            "at_boundary": fit.at_boundary}


def _run_temp_scale(cfg: ExperimentConfig, dprime, test):
    _temp_modes_valid(cfg)
    jobs = [(config_to_dict(cfg), _dataset_parts(dprime), _dataset_parts(test), s)
            for s in cfg.experiment.seeds]
    payloads, failures = _run_seed_jobs(_temp_scale_seed_job, jobs, cfg.experiment.seeds)
    rows = [r for chunk, _ in payloads for r in chunk]
    runs = [e for _, entries in payloads for e in entries]
    return rows, runs, None, failures


# ---------------------------------------------------------------------------
# early stopping

def _early_stop_seed_job(args):
    cfg_doc, dprime_parts, test_parts, seed = args
    cfg = config_from_dict(cfg_doc)
    dprime, test = _datasets_from_parts(dprime_parts, test_parts)
    dims = [dprime.x.shape[1]] + list(cfg.model.hidden) + [dprime.n_classes]
    m_total = cfg.ensemble.members
    opt = _optimizer_config(cfg, cosine=False)
    ece_bins = cfg.experiment.ece_bins
    rows, run_entries = [], []
    for strategy in cfg.experiment.strategies:
        for mode in cfg.experiment.modes:
            if strategy == DISJOINT and mode == JOINT:
                continue  # no jointly evaluable set; not a valid cell
            for val_pct in cfg.val_pcts():
                plan = make_plan(strategy, len(dprime), val_pct, m_total, seed,
                                 dprime.y)
                stop = StoppingConfig(mode=mode, patience=cfg.stopping.patience,
                                      max_epochs=cfg.stopping.max_epochs,
                                      batch_size=cfg.stopping.batch_size)
                result = train_ensemble(dprime.x, dprime.y, plan, dims, opt, stop,
                                        seed)
                norm = float(np.mean([s.normalized_epochs for s in result.stops]))
                tags = dict(strategy=strategy, val_pct=val_pct, seed=seed,
                            ensemble_size=m_total)
                test_probs = [member_probs(m, test.x) for m in result.members]
                rec = metrics.compute_record(test_probs, test.y, ece_bins=ece_bins,
                                             normalized_epochs=norm, **tags)
                rows.append(make_row("early_stop", mode, None, "test",
                                     ENSEMBLE_SCOPE, rec))
                avg = member_avg_record([(p, test.y) for p in test_probs],
                                        ece_bins=ece_bins, normalized_epochs=norm,
                                        **tags)
                rows.append(make_row("early_stop", mode, None, "test",
                                     MEMBER_AVG_SCOPE, avg))
                run_entries.append({
                    "strategy": strategy, "mode": mode, "val_pct": val_pct,
                    "seed": seed, "plan": plan_reference(plan, val_pct),
                    "stops": [s.to_dict() for s in result.stops] if result.stop is None
                             else [result.stop.to_dict()]})
    return rows, run_entries


def _run_early_stop(cfg: ExperimentConfig, dprime, test):
    jobs = [(config_to_dict(cfg), _dataset_parts(dprime), _dataset_parts(test), s)
            for s in cfg.experiment.seeds]
    payloads, failures = _run_seed_jobs(_early_stop_seed_job, jobs, cfg.experiment.seeds)
    rows = [r for chunk, _ in payloads for r in chunk]
    runs = [e for _, entries in payloads for e in entries]
    return rows, runs, None, failures


# ---------------------------------------------------------------------------
# batch ensemble

def parse_scheme(name: str):
    """'random_sign' or 'gaussian_<sigma>' into (kind, sigma)."""
    if name == RANDOM_SIGN:
        return RANDOM_SIGN, 0.0
    if name.startswith(GAUSSIAN):
        suffix = name[len(GAUSSIAN):].lstrip("_")
        try:
            return GAUSSIAN, float(suffix)
        except ValueError:
            pass
    raise ConfigError(f"unknown fast-weight scheme {name!r}; expected "
                      "'random_sign' or 'gaussian_<sigma>'")


def _batch_ensemble_seed_job(args):
    cfg_doc, dprime_parts, test_parts, seed = args
    cfg = config_from_dict(cfg_doc)
    dprime, test = _datasets_from_parts(dprime_parts, test_parts)
    dims = [dprime.x.shape[1]] + list(cfg.model.hidden) + [dprime.n_classes]
    m_total = cfg.ensemble.members
    opt = _optimizer_config(cfg, cosine=False)
    stop = StoppingConfig(mode=JOINT, patience=cfg.stopping.patience,
                          max_epochs=cfg.stopping.max_epochs,
                          batch_size=cfg.stopping.batch_size)
    ece_bins = cfg.experiment.ece_bins
    rows, run_entries = [], []
    for scheme_name in cfg.experiment.schemes:
        kind, sigma = parse_scheme(scheme_name)
        for strategy in cfg.experiment.strategies:
            for val_pct in cfg.val_pcts():
                plan = make_plan(strategy, len(dprime), val_pct, m_total, seed,
                                 dprime.y)
                result = be_train(dprime.x, dprime.y, plan, dims, kind, opt, stop,
                                  seed, sigma=sigma)
                tags = dict(strategy=strategy, val_pct=val_pct, seed=seed,
                            ensemble_size=m_total)
                norm = result.stop.normalized_epochs
                test_probs = result.all_probs(test.x)
                rec = metrics.compute_record(test_probs, test.y, ece_bins=ece_bins,
                                             normalized_epochs=norm, **tags)
                rows.append(make_row("batch_ensemble", scheme_name, None, "test",
                                     ENSEMBLE_SCOPE, rec))
                rows.append(make_row("batch_ensemble", scheme_name, None, "test",
                                     MEMBER_AVG_SCOPE,
                                     member_avg_record([(p, test.y) for p in test_probs],
                                                       ece_bins=ece_bins,
                                                       normalized_epochs=norm, **tags)))
                for split_name, index_of in (("train", lambda ms: ms.train_idx),
                                             ("val", lambda ms: ms.val_idx)):
                    pairs = [(result.member_probs(dprime.x[index_of(ms)], m),
                              dprime.y[index_of(ms)])
                             for m, ms in enumerate(plan.members)]
                    rows.append(make_row("batch_ensemble", scheme_name, None,
                                         split_name, MEMBER_AVG_SCOPE,
                                         member_avg_record(pairs, ece_bins=ece_bins,
                                                           normalized_epochs=norm,
                                                           **tags)))
                run_entries.append({
                    "scheme": scheme_name, "strategy": strategy, "val_pct": val_pct,
                    "seed": seed, "plan": plan_reference(plan, val_pct),
                    "stops": [result.stop.to_dict()]})
    return rows, run_entries


def _run_batch_ensemble(cfg: ExperimentConfig, dprime, test):
    jobs = [(config_to_dict(cfg), _dataset_parts(dprime), _dataset_parts(test), s)
            for s in cfg.experiment.seeds]
    payloads, failures = _run_seed_jobs(_batch_ensemble_seed_job, jobs, cfg.experiment.seeds)
    rows = [r for chunk, _ in payloads for r in chunk]
    runs = [e for _, entries in payloads for e in entries]
    return rows, runs, None, failures


# ---------------------------------------------------------------------------
# joint stopping followed by joint temperature scaling on the same holdout

def _stop_then_scale_seed_job(args):
    cfg_doc, dprime_parts, test_parts, seed = args
    cfg = config_from_dict(cfg_doc)
    dprime, test = _datasets_from_parts(dprime_parts, test_parts)
    dims = [dprime.x.shape[1]] + list(cfg.model.hidden) + [dprime.n_classes]
    m_total = cfg.ensemble.members
    opt = _optimizer_config(cfg, cosine=False)
    val_pct = cfg.val_pcts()[0]
    plan = make_plan(SHARED, len(dprime), val_pct, m_total, seed, dprime.y)
    stop = StoppingConfig(mode=JOINT, patience=cfg.stopping.patience,
                          max_epochs=cfg.stopping.max_epochs,
                          batch_size=cfg.stopping.batch_size)
    result = train_ensemble(dprime.x, dprime.y, plan, dims, opt, stop, seed)
    ece_bins = cfg.experiment.ece_bins
    norm = result.stop.normalized_epochs
    tags = dict(strategy=SHARED, val_pct=val_pct, seed=seed, ensemble_size=m_total)
    test_logits = [member_logits(m, test.x) for m in result.members]
    rows = [make_row("stop_then_scale", "none", None, "test", ENSEMBLE_SCOPE,
                     metrics.compute_record([softmax(z) for z in test_logits],
                                            test.y, ece_bins=ece_bins,
                                            normalized_epochs=norm, **tags))]
    eval_sets = [([member_logits(result.members[m], dprime.x[idx]) for m in ids],
                  dprime.y[idx])
                 for ids, idx in joint_eval_sets(plan)]
    fit = calibration.calibrate_joint(eval_sets)
    tempered = [calibration.apply_temperature(z, fit.temperature)
                for z in test_logits]
    rows.append(make_row("stop_then_scale", "joint_scale", None, "test",
                         ENSEMBLE_SCOPE,
                         metrics.compute_record(tempered, test.y, ece_bins=ece_bins,
                                                normalized_epochs=norm, **tags)))
    entry = {"strategy": SHARED, "val_pct": val_pct, "seed": seed,
             "plan": plan_reference(plan, val_pct),
             "stops": [result.stop.to_dict()], "fits": [_fit_to_dict(fit)]}
    return rows, [entry]


def _run_stop_then_scale(cfg: ExperimentConfig, dprime, test):
    jobs = [(config_to_dict(cfg), _dataset_parts(dprime), _dataset_parts(test), s)
            for s in cfg.experiment.seeds]
    payloads, failures = _run_seed_jobs(_stop_then_scale_seed_job, jobs, cfg.experiment.seeds)
    rows = [r for chunk, _ in payloads for r in chunk]
    runs = [e for _, entries in payloads for e in entries]
    return rows, runs, None, failures


# ---------------------------------------------------------------------------
# aggregation and reporting

MONITOR_HEADER = (["experiment", "variant", "strategy", "val_pct", "seed"]
                  + MONITOR_COLUMNS)


def monitor_rows_from_runs(experiment: str, runs) -> list[list]:
    """Per-epoch validation-score log reconstructed from the run entries."""
    rows = []
    for entry in runs:
        stops = entry.get("stops")
        if not stops:
            continue
        variant = entry.get("mode", entry.get("scheme", ""))
        prefix = [experiment, variant, entry.get("strategy", ""),
                  entry.get("val_pct", ""), entry.get("seed", "")]
        if variant == INDIVIDUAL:
            sources = list(enumerate(stops))
        else:
            sources = [("ensemble", stops[0])]
        for member_id, stop in sources:
            for epoch, score in enumerate(stop["history"]):
                rows.append(prefix + [epoch, member_id, "val", score])
    return rows


def _row_key(row) -> tuple:
    # everything except seed and the metric values identifies an aggregate cell
    head = row[:len(ROW_COLUMNS) - len(METRIC_NAMES)]
    seed_free = head[:ROW_COLUMNS.index("seed")] + head[ROW_COLUMNS.index("seed") + 1:]
    return tuple(seed_free)


def aggregate_rows(rows):
    """Seed-mean and SEM per aggregate cell, plus long-format plot data."""
    groups: dict = {}
    for row in rows:
        groups.setdefault(_row_key(row), []).append(row)
    agg_header = ([c for c in ROW_COLUMNS[:len(ROW_COLUMNS) - len(METRIC_NAMES)]
                   if c != "seed"] + ["n"]
                  + [f"{m}_{s}" for m in METRIC_NAMES for s in ("mean", "sem")])
    sort_cols = ["experiment", "strategy", "val_pct", "variant", "wd", "split",
                 "scope", "ensemble_size"]
    idx = {c: agg_header.index(c) for c in sort_cols}
    agg_rows, plot_rows = [], []
    metric_offset = len(ROW_COLUMNS) - len(METRIC_NAMES)
    for key, members in groups.items():
        n = len(members)
        out = list(key) + [n]
        stats = {}
        for mi, name in enumerate(METRIC_NAMES):
            vals = [r[metric_offset + mi] for r in members
                    if r[metric_offset + mi] != "" and r[metric_offset + mi] is not None]
            if vals:
                mean, sem = metrics.mean_sem([float(v) for v in vals])
            else:
                mean, sem = "", ""
            out += [mean, sem]
            stats[name] = (mean, sem)
        agg_rows.append(out)
        for name in METRIC_NAMES:
            mean, sem = stats[name]
            if mean != "":
                plot_rows.append(list(key) + [name, mean, sem, n])
    sort_key = lambda r: tuple(str(r[idx[c]]) for c in sort_cols)
    agg_rows.sort(key=sort_key)
    plot_header = ([c for c in ROW_COLUMNS[:metric_offset] if c != "seed"]
                   + ["metric", "mean", "sem", "n"])
    pidx = {c: plot_header.index(c) for c in sort_cols if c in plot_header}
    plot_rows.sort(key=lambda r: tuple(str(r[pidx[c]]) for c in sort_cols) +
                                 (str(r[plot_header.index("metric")]),))
    return agg_header, agg_rows, plot_header, plot_rows


def _format_cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: str, header, rows) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow([_format_cell(v) for v in row])
    os.replace(tmp, path)


def read_rows_csv(path: str):
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != ROW_COLUMNS:
            raise ConfigError(f"{path}: unexpected cells.csv header")
        return [row for row in reader]


def write_report(out_dir: str, rows) -> dict:
    agg_header, agg_rows, plot_header, plot_rows = aggregate_rows(rows)
    paths = {"aggregate": os.path.join(out_dir, "aggregate.csv"),
             "plotdata": os.path.join(out_dir, "plotdata.csv")}
    write_csv(paths["aggregate"], agg_header, agg_rows)
    write_csv(paths["plotdata"], plot_header, plot_rows)
    return paths


_RUNNERS = {
    "wd_sweep": _run_wd_sweep,
    "temp_scale": _run_temp_scale,
    "early_stop": _run_early_stop,
    "batch_ensemble": _run_batch_ensemble,
    "stop_then_scale": _run_stop_then_scale,
}


def run_experiment(cfg: ExperimentConfig, out_dir: str | None = None) -> dict:
    """Dispatch one experiment, write outputs and return the manifest."""
    cfg.validate()
    kind = cfg.experiment.kind
    runner = _RUNNERS.get(kind)
    if runner is None:
        raise ConfigError(f"unknown experiment kind {kind!r}")
    out_dir = out_dir or cfg.experiment.out_dir
    os.makedirs(out_dir, exist_ok=True)
    started = time.time()
    dprime, test = build_dataset(cfg)
    rows, runs, summary, failures = runner(cfg, dprime, test)
    cells_path = os.path.join(out_dir, "cells.csv")
    write_csv(cells_path, ROW_COLUMNS, rows)
    report_paths = write_report(out_dir, rows)
    mon_rows = monitor_rows_from_runs(kind, runs)
    if mon_rows:
        report_paths["monitor"] = os.path.join(out_dir, "monitor.csv")
        write_csv(report_paths["monitor"], MONITOR_HEADER, mon_rows)
    manifest = {
        "experiment": kind,
        "config": config_to_dict(cfg),
        "seeds": list(cfg.experiment.seeds),
        "ece_bins": cfg.experiment.ece_bins,
        "n_dprime": len(dprime),
        "n_test": len(test),
        "runs": runs,
        "failures": failures,
        "outputs": {"cells": cells_path, **report_paths},
        "wall_clock_s": time.time() - started,
    }
    if summary is not None:
        manifest["summary"] = summary
        summary_path = os.path.join(out_dir, "summary.json")
        _write_json(summary_path, summary)
        manifest["outputs"]["summary"] = summary_path
    _write_json(os.path.join(out_dir, "manifest.json"), manifest)
    if failures:
        raise ExperimentError(
            f"{len(failures)} of {len(cfg.experiment.seeds)} seeds failed; "
            f"partial results flushed to {out_dir}")
    return manifest


def _write_json(path: str, doc) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(doc, f, indent=1, default=_json_default)
    os.replace(tmp, path)


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def rerun_from_manifest(manifest_path: str, out_dir: str) -> dict:
    """Re-run an experiment from its manifest's resolved config."""
    with open(manifest_path) as f:
        manifest = json.load(f)
    cfg = config_from_dict(manifest["config"])
    return run_experiment(cfg, out_dir=out_dir)
