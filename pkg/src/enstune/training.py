"""Member training loops with individual vs joint early stopping, patience
bookkeeping and step-normalized epoch accounting.

An "improvement" is a strictly lower monitored score; ties burn patience.
Stopping restores the parameters snapshotted at the best epoch. Joint mode
advances all members one epoch in lockstep, monitors the ensemble score on
the plan's jointly evaluable sets and stops everyone together.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .data import Standardizer
from .netcore import (
    MlpParams,
    Optimizer,
    cosine_lr,
    loss_and_grad,
    mlp_forward,
    softmax,
)
from .splits import DISJOINT, JointEvalUnavailableError, SplitPlan, joint_eval_sets

# purposes for per-member RNG stream derivation
_INIT, _BATCH = 0, 1

INDIVIDUAL = "individual"
JOINT = "joint"
NONE = "none"


def member_rng(base_seed: int, member_index: int, purpose: int) -> np.random.Generator:
    """Independent stream per (seed, member, purpose); members never share."""
    return np.random.default_rng(np.random.SeedSequence([base_seed, member_index, purpose]))


@dataclass
class StoppingConfig:
    mode: str = INDIVIDUAL
    patience: int = 10
    max_epochs: int = 100
    batch_size: int = 128
    disjoint_fallback: bool = False  # joint mode on disjoint plans: avg member NLL

    def __post_init__(self):
        if self.patience < 1 or self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("patience, max_epochs and batch_size must be >= 1")
        if self.mode not in (INDIVIDUAL, JOINT, NONE):
            raise ValueError(f"unknown stopping mode {self.mode!r}")


@dataclass
class StopDecision:
    stop_epoch: int
    best_epoch: int
    best_score: float
    normalized_epochs: float | None
    history: list[float]
    stopped_early: bool

    def to_dict(self) -> dict:
        return {"stop_epoch": self.stop_epoch, "best_epoch": self.best_epoch,
                "best_score": self.best_score,
                "normalized_epochs": self.normalized_epochs,
                "stopped_early": self.stopped_early, "history": list(self.history)}


class PatienceTracker:
    """Incremental patience controller over a monitored score."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_score = math.inf
        self.best_epoch = -1
        self.epoch = -1

    def update(self, score: float) -> bool:
        """Record one epoch's score; returns True if it strictly improved."""
        self.epoch += 1
        if score < self.best_score:
            self.best_score = score
            self.best_epoch = self.epoch
            return True
        return False

    @property
    def should_stop(self) -> bool:
        return self.epoch - self.best_epoch >= self.patience


def stop_controller(history, patience: int) -> StopDecision:
    """Replay a monitored-score history through the patience rule."""
    history = [float(h) for h in history]
    if not history:
        raise ValueError("history must be non-empty")
    tracker = PatienceTracker(patience)
    for epoch, score in enumerate(history):
        tracker.update(score)
        if tracker.should_stop:
            return StopDecision(epoch, tracker.best_epoch, tracker.best_score,
                                None, history[:epoch + 1], True)
    return StopDecision(len(history) - 1, tracker.best_epoch, tracker.best_score,
                        None, history, False)


def normalized_epochs(steps_taken: int, batch_size: int, n_total: int) -> float:
    """Optimizer steps scaled to epochs of the full non-test pool."""
    if n_total <= 0:
        raise ValueError("n_total must be positive")
    return steps_taken * batch_size / n_total


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 0.0
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_bias: bool = False
    cosine_epochs: int | None = None  # anneal to 0 over this many epochs

    def build(self, params: MlpParams) -> Optimizer:
        return Optimizer(self.kind, params.arrays(), self.lr,
                         weight_decay=self.weight_decay, momentum=self.momentum,
                         beta1=self.beta1, beta2=self.beta2, eps=self.eps,
                         decay_mask=params.decay_mask(self.decay_bias))


@dataclass
class TrainedMember:
    params: MlpParams
    scaler: Standardizer
    stop: StopDecision
    steps: int = 0


def member_probs(member: TrainedMember, x: np.ndarray) -> np.ndarray:
    """Class probabilities on raw features through the member's scaler."""
    return softmax(mlp_forward(member.params, member.scaler(x)))


def member_logits(member: TrainedMember, x: np.ndarray) -> np.ndarray:
    return mlp_forward(member.params, member.scaler(x))


def _batches(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield order[start:start + batch_size]


class _MemberState:
    """One member's parameters, scaler, data views and RNG streams."""

    def __init__(self, x, y, train_idx, val_idx, dims, opt_cfg, seed, member_index,
                 standardize):
        if len(train_idx) == 0 or len(val_idx) == 0:
            raise ValueError(f"member {member_index}: empty train or validation set")
        self.scaler = (Standardizer.fit(x[train_idx]) if standardize
                       else Standardizer.identity(x.shape[1]))
        self.x_train = self.scaler(x[train_idx])
        self.y_train = y[train_idx]
        self.x_val = self.scaler(x[val_idx])
        self.y_val = y[val_idx]
        init_rng = member_rng(seed, member_index, _INIT)
        self.params = MlpParams.random(dims, init_rng)
        self.opt = opt_cfg.build(self.params)
        self.batch_rng = member_rng(seed, member_index, _BATCH)
        self.steps = 0
        self.best_params = self.params.copy()

    def run_epoch(self, opt_cfg: OptimizerConfig, batch_size: int,
                  total_steps: int | None) -> None:
        order = self.batch_rng.permutation(len(self.y_train))
        for batch in _batches(order, batch_size):
            if total_steps is not None:
                lr_now = cosine_lr(opt_cfg.lr, min(self.steps, total_steps), total_steps)
            else:
                lr_now = opt_cfg.lr
            _, grads = loss_and_grad(self.params, self.x_train[batch], self.y_train[batch])
            self.opt.step(self.params.arrays(), grads.arrays(), lr_now)
            self.steps += 1

    def val_probs(self) -> np.ndarray:
        return softmax(mlp_forward(self.params, self.x_val))

    def val_nll(self) -> float:
        return metrics.nll(self.val_probs(), self.y_val)

    def snapshot(self) -> None:
        self.best_params = self.params.copy()

    def restore(self) -> None:
        self.params = self.best_params.copy()


def train_member(x, y, train_idx, val_idx, dims, opt_cfg: OptimizerConfig,
                 stop_cfg: StoppingConfig, seed: int, member_index: int = 0,
                 standardize: bool = True) -> TrainedMember:
    """Train one MLP with per-epoch validation monitoring.

    With mode "none" the loop runs all epochs and keeps the final weights;
    otherwise it stops on exhausted patience and restores the best epoch.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    state = _MemberState(x, y, train_idx, val_idx, dims, opt_cfg, seed,
                         member_index, standardize)
    steps_per_epoch = math.ceil(len(state.y_train) / stop_cfg.batch_size)
    total_steps = (steps_per_epoch * opt_cfg.cosine_epochs
                   if opt_cfg.cosine_epochs else None)
    tracker = PatienceTracker(stop_cfg.patience)
    history = []
    stopped_early = False
    for epoch in range(stop_cfg.max_epochs):
        state.run_epoch(opt_cfg, stop_cfg.batch_size, total_steps)
        score = state.val_nll()
        history.append(score)
        if tracker.update(score):
            state.snapshot()
        if stop_cfg.mode != NONE and tracker.should_stop:
            stopped_early = True
            break
    if stop_cfg.mode != NONE:
        state.restore()
    decision = StopDecision(len(history) - 1, tracker.best_epoch, tracker.best_score,
                            normalized_epochs(state.steps, stop_cfg.batch_size, len(y)),
                            history, stopped_early)
    return TrainedMember(state.params, state.scaler, decision, state.steps)


@dataclass
class EnsembleResult:
    members: list[TrainedMember]
    stop: StopDecision | None = None  # joint-mode decision, None for individual
    stops: list[StopDecision] = field(default_factory=list)

    def probs(self, x: np.ndarray, k: int | None = None) -> list[np.ndarray]:
        chosen = self.members if k is None else self.members[:k]
        return [member_probs(m, x) for m in chosen]


MONITOR_COLUMNS = ["epoch", "member_id", "split", "nll"]


def monitor_rows(result: "EnsembleResult") -> list[list]:
    """Per-epoch monitored scores: (epoch, member_id or "ensemble", "val", nll).

    Joint runs log the ensemble score once per epoch; individual runs log
    each member's own validation score.
    """
    rows = []
    if result.stop is not None:
        for epoch, score in enumerate(result.stop.history):
            rows.append([epoch, "ensemble", "val", score])
        return rows
    for member_id, member in enumerate(result.members):
        for epoch, score in enumerate(member.stop.history):
            rows.append([epoch, member_id, "val", score])
    return rows


def _joint_score(states, plan: SplitPlan, x, y, fallback: bool) -> float:
    """Monitored score for joint stopping under the plan's strategy."""
    sets = joint_eval_sets(plan)
    if not sets:
        if not fallback:
            raise JointEvalUnavailableError(
                "joint stopping on a disjoint plan: no common validation set; "
                "pass disjoint_fallback=True to monitor the average member NLL")
        return float(np.mean([s.val_nll() for s in states]))
    vals = []
    for member_ids, idx in sets:
        probs = [softmax(mlp_forward(states[m].params, states[m].scaler(x[idx])))
                 for m in member_ids]
        vals.append(metrics.nll(metrics.ensemble_mean(probs), y[idx]))
    return float(np.mean(vals))


def train_ensemble(x, y, plan: SplitPlan, dims, opt_cfg: OptimizerConfig,
                   stop_cfg: StoppingConfig, base_seed: int,
                   member_seeds: list[int] | None = None,
                   standardize: bool = True) -> EnsembleResult:
    """Train all plan members, with individual or joint early stopping."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    seeds = member_seeds if member_seeds is not None else [base_seed] * plan.n_members
    if len(seeds) != plan.n_members:
        raise ValueError("member_seeds must have one entry per member")
    member_ids = (range(plan.n_members) if member_seeds is None
                  else [0] * plan.n_members)  # explicit seeds already disambiguate

    if stop_cfg.mode in (INDIVIDUAL, NONE):
        members = [train_member(x, y, ms.train_idx, ms.val_idx, dims, opt_cfg,
                                stop_cfg, seeds[m], member_index=mid,
                                standardize=standardize)
                   for m, (ms, mid) in enumerate(zip(plan.members, member_ids))]
        return EnsembleResult(members, stops=[m.stop for m in members])

    # joint mode: fail fast on disjoint plans before any training
    if plan.strategy == DISJOINT and not stop_cfg.disjoint_fallback:
        raise JointEvalUnavailableError(
            "joint stopping on a disjoint plan: no common validation set; "
            "pass disjoint_fallback=True to monitor the average member NLL")
    states = [_MemberState(x, y, ms.train_idx, ms.val_idx, dims, opt_cfg,
                           seeds[m], mid, standardize)
              for m, (ms, mid) in enumerate(zip(plan.members, member_ids))]
    steps_per_epoch = max(math.ceil(len(s.y_train) / stop_cfg.batch_size)
                          for s in states)
    total_steps = (steps_per_epoch * opt_cfg.cosine_epochs
                   if opt_cfg.cosine_epochs else None)
    tracker = PatienceTracker(stop_cfg.patience)
    history = []
    stopped_early = False
    for epoch in range(stop_cfg.max_epochs):
        for s in states:
            s.run_epoch(opt_cfg, stop_cfg.batch_size, total_steps)
        score = _joint_score(states, plan, x, y, stop_cfg.disjoint_fallback)
        history.append(score)
        if tracker.update(score):
            for s in states:
                s.snapshot()
        if tracker.should_stop:
            stopped_early = True
            break
    for s in states:
        s.restore()
    mean_steps = float(np.mean([s.steps for s in states]))
    decision = StopDecision(len(history) - 1, tracker.best_epoch, tracker.best_score,
                            normalized_epochs(mean_steps, stop_cfg.batch_size, len(y)),
                            history, stopped_early)
    members = [TrainedMember(s.params, s.scaler, decision, s.steps) for s in states]
    return EnsembleResult(members, stop=decision, stops=[decision] * len(members))
