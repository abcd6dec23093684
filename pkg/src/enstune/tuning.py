"""Weight-decay grid search under single-model vs ensemble selection
objectives, and the resulting optimality gap on test loss.

The sweep trains every grid cell to a fixed epoch budget with cosine
annealing on a shared holdout; selection is the argmin of seed-mean
validation NLL under either objective, ties breaking toward the larger
(more regularizing) weight decay.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .data import Dataset
from .netcore import NonFiniteLossError
from .splits import make_shared
from .training import (
    NONE,
    OptimizerConfig,
    StoppingConfig,
    member_probs,
    train_ensemble,
)

INDIVIDUAL_OBJECTIVE = "individual"
ENSEMBLE_OBJECTIVE = "ensemble"


@dataclass
class HyperGrid:
    weight_decays: list[float]
    ensemble_sizes: list[int]
    seeds: list[int]

    def __post_init__(self):
        if 0.0 not in self.weight_decays:
            raise ValueError("the weight-decay grid must include 0")
        if any(b <= a for a, b in zip(self.weight_decays, self.weight_decays[1:])):
            raise ValueError("weight decays must be strictly increasing")
        if any(w < 0 for w in self.weight_decays):
            raise ValueError("weight decays must be >= 0")
        if not self.seeds or not self.ensemble_sizes:
            raise ValueError("need at least one seed and one ensemble size")


def log_grid(lo: float, hi: float, n: int) -> list[float]:
    """Log-spaced weight decays plus the mandatory 0."""
    return [0.0] + list(np.geomspace(lo, hi, n))


@dataclass
class SweepCell:
    wd: float
    seed: int
    diverged: bool = False
    val_records: dict[int, metrics.MetricsRecord] = field(default_factory=dict)
    test_records: dict[int, metrics.MetricsRecord] = field(default_factory=dict)
    member_val_nlls: list[float] = field(default_factory=list)


@dataclass
class SweepResult:
    grid: HyperGrid
    cells: list[SweepCell]
    val_pct: float

    def cell(self, wd: float, seed: int) -> SweepCell:
        for c in self.cells:
            if c.wd == wd and c.seed == seed:
                return c
        raise KeyError(f"no sweep cell for wd={wd}, seed={seed}")

    def usable_wds(self) -> list[float]:
        """Grid entries with at least one non-diverged cell, ascending."""
        out = []
        for wd in sorted(self.grid.weight_decays):
            cells = [c for c in self.cells if c.wd == wd and not c.diverged]
            if cells:
                out.append(wd)
            else:
                warnings.warn(f"weight decay {wd} excluded: all cells diverged")
        return out


@dataclass
class SweepConfig:
    hidden: list[int]
    n_members: int
    val_fraction: float = 0.1
    epochs: int = 40
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    optimizer: str = "sgd_momentum"
    ece_bins: int = 15


def run_sweep(dprime: Dataset, test: Dataset, grid: HyperGrid,
              cfg: SweepConfig) -> SweepResult:
    """Train every (weight decay, seed) cell and record per-size metrics.

    Size-k ensembles are the first k members by index. Cells whose training
    diverges are kept, flagged, and excluded from selection.
    """
    if max(grid.ensemble_sizes) > cfg.n_members:
        raise ValueError("ensemble sizes exceed the number of trained members")
    dims = [dprime.x.shape[1]] + list(cfg.hidden) + [dprime.n_classes]
    cells = []
    for wd in grid.weight_decays:
        opt = OptimizerConfig(kind=cfg.optimizer, lr=cfg.lr, weight_decay=wd,
                              momentum=cfg.momentum, cosine_epochs=cfg.epochs)
        stop = StoppingConfig(mode=NONE, max_epochs=cfg.epochs,
                              batch_size=cfg.batch_size)
        for seed in grid.seeds:
            cell = SweepCell(wd=wd, seed=seed)
            plan = make_shared(len(dprime), cfg.val_fraction, cfg.n_members,
                               rng_seed=seed, labels=dprime.y)
            try:
                result = train_ensemble(dprime.x, dprime.y, plan, dims, opt,
                                        stop, base_seed=seed)
            except NonFiniteLossError as err:
                warnings.warn(f"sweep cell wd={wd} seed={seed} diverged: {err}")
                cell.diverged = True
                cells.append(cell)
                continue
            val_idx = plan.members[0].val_idx
            val_probs = [member_probs(m, dprime.x[val_idx]) for m in result.members]
            test_probs = [member_probs(m, test.x) for m in result.members]
            norm_epochs = float(np.mean([s.normalized_epochs for s in result.stops]))
            tags = dict(strategy="shared", val_pct=cfg.val_fraction, seed=seed)
            for k in grid.ensemble_sizes:
                cell.val_records[k] = metrics.compute_record(
                    val_probs[:k], dprime.y[val_idx], ece_bins=cfg.ece_bins,
                    ensemble_size=k, normalized_epochs=norm_epochs, **tags)
                cell.test_records[k] = metrics.compute_record(
                    test_probs[:k], test.y, ece_bins=cfg.ece_bins,
                    ensemble_size=k, normalized_epochs=norm_epochs, **tags)
            cell.member_val_nlls = [metrics.nll(p, dprime.y[val_idx])
                                    for p in val_probs]
            cells.append(cell)
    return SweepResult(grid, cells, cfg.val_fraction)


def _selection_score(sweep: SweepResult, wd: float, objective: str,
                     single_member: bool) -> float:
    cells = [c for c in sweep.cells if c.wd == wd and not c.diverged]
    k_full = max(sweep.grid.ensemble_sizes)
    per_seed = []
    for c in cells:
        if objective == ENSEMBLE_OBJECTIVE:
            per_seed.append(c.val_records[k_full].nll)
        elif single_member:
            per_seed.append(c.member_val_nlls[0])
        else:
            per_seed.append(float(np.mean(c.member_val_nlls)))
    return float(np.mean(per_seed))


def select_h(sweep: SweepResult, objective: str,
             single_member: bool = False) -> float:
    """Argmin of seed-mean validation NLL over the grid.

    ``individual`` scores the mean member NLL (or just the first member's
    with ``single_member``); ``ensemble`` scores the full-size ensemble NLL.
    Exact ties go to the larger weight decay.
    """
    if objective not in (INDIVIDUAL_OBJECTIVE, ENSEMBLE_OBJECTIVE):
        raise ValueError(f"unknown selection objective {objective!r}")
    if not sweep.cells:
        raise ValueError("sweep has no cells")
    best_wd = None
    best_score = np.inf
    for wd in sweep.usable_wds():
        score = _selection_score(sweep, wd, objective, single_member)
        if score <= best_score:
            best_wd, best_score = wd, score
    if best_wd is None:
        raise ValueError("every sweep cell diverged; nothing to select")
    return best_wd


def selection_score(sweep: SweepResult, wd: float, objective: str,
                    single_member: bool = False) -> float:
    """Seed-mean validation score of one grid entry under an objective."""
    return _selection_score(sweep, wd, objective, single_member)


def optimality_gap(sweep: SweepResult, h_ind: float, h_ens: float):
    """Seed-mean test-NLL penalty of the individual-proxy selection.

    Returns (gap, sem): full-ensemble test NLL at ``h_ind`` minus at
    ``h_ens``, paired per seed.
    """
    k_full = max(sweep.grid.ensemble_sizes)
    diffs = []
    for seed in sweep.grid.seeds:
        a = sweep.cell(h_ind, seed)
        b = sweep.cell(h_ens, seed)
        if a.diverged or b.diverged:
            raise ValueError(f"seed {seed}: selected cell diverged, gap undefined")
        diffs.append(a.test_records[k_full].nll - b.test_records[k_full].nll)
    return metrics.mean_sem(diffs)
