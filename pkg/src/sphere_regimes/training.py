"""Training loop shared by toy and network runs, with bit-exact checkpoints."""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .core import GroupLayout, elr_report_from_norms
from .data import Dataset
from .instrument import StepRecord, adjacent_cosine_distance
from .optim import (DivergenceError, OptimizerConfig, projected_update, random_walk_update,
                    schedule_value, whole_space_update)

CHECKPOINT_VERSION = 1


@dataclass
class Problem:
    """An objective plus how to feed it: full batch (toy) or shuffled mini-batches (network)."""

    objective: object
    init_theta: np.ndarray
    chance_level: float
    conv_floor: float
    dataset: Dataset | None = None
    batch_size: int = 0
    conv_level: float | None = None    # fixed convergence level; overrides conv_floor

    @property
    def layout(self) -> GroupLayout:
        return self.objective.layout

    @property
    def full_batch(self) -> bool:
        return self.dataset is None

    def epoch_batches(self, rng: np.random.Generator) -> list:
        if self.full_batch:
            return [None]
        perm = rng.permutation(self.dataset.n_train)
        return [(self.dataset.x_train[idx], self.dataset.y_train[idx])
                for idx in _chunks(perm, self.batch_size)]

    def eval_batches(self, split: str = "train") -> list:
        if self.full_batch:
            return [None]
        x = getattr(self.dataset, f"x_{split}")
        y = getattr(self.dataset, f"y_{split}")
        return [(x[idx], y[idx]) for idx in _chunks(np.arange(len(y)), self.batch_size)]


def _chunks(idx: np.ndarray, size: int) -> list[np.ndarray]:
    out = [idx[i:i + size] for i in range(0, len(idx), size)]
    # batch norm cannot use a single-sample batch
    return [c for c in out if len(c) >= 2]


@dataclass
class TrainState:
    theta: np.ndarray
    radius: float
    step: int = 0
    epoch: int = 0
    batch_rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    walk_rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    prev_theta: np.ndarray | None = None

    @classmethod
    def fresh(cls, theta: np.ndarray, batch_seed: int, walk_seed: int) -> "TrainState":
        theta = np.array(theta, dtype=np.float64)
        return cls(theta, float(np.linalg.norm(theta)), 0, 0,
                   np.random.default_rng(batch_seed), np.random.default_rng(walk_seed))

    def to_bytes(self, meta: dict) -> bytes:
        header = dict(meta)
        header.update(version=CHECKPOINT_VERSION, step=self.step, epoch=self.epoch, radius=self.radius,
                      batch_rng=self.batch_rng.bit_generator.state,
                      walk_rng=self.walk_rng.bit_generator.state)
        arrays = {"theta": self.theta}
        if self.prev_theta is not None:
            arrays["prev_theta"] = self.prev_theta
        buf = io.BytesIO()
        np.savez(buf, meta=np.array(json.dumps(header, sort_keys=True)), **arrays)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> tuple["TrainState", dict]:
        with np.load(io.BytesIO(blob), allow_pickle=False) as npz:
            meta = json.loads(str(npz["meta"]))
            theta = np.array(npz["theta"])
            prev = np.array(npz["prev_theta"]) if "prev_theta" in npz.files else None
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        batch_rng, walk_rng = np.random.default_rng(), np.random.default_rng()
        batch_rng.bit_generator.state = meta.pop("batch_rng")
        walk_rng.bit_generator.state = meta.pop("walk_rng")
        state = cls(theta, float(meta["radius"]), int(meta["step"]), int(meta["epoch"]),
                    batch_rng, walk_rng, prev)
        return state, meta


@dataclass
class TrainResult:
    records: list[StepRecord]
    state: TrainState
    diverged: bool


def measure(problem: Problem, theta: np.ndarray, lr: float) -> dict:
    """Loss, errors, sharpness proxies and the ELR report at ``theta``.

    For mini-batch problems the gradient summary is the per-group root mean
    square over one ordered pass through the training set, which keeps the
    ELR/ESS identities exact.
    """
    obj = problem.objective
    layout = problem.layout
    rho = math.sqrt(float(np.dot(theta, theta)))
    group_sq = np.zeros(layout.n_groups)
    norms, losses, errors, sizes = [], [], [], []
    for batch in problem.eval_batches("train"):
        loss, grad = obj.value_and_grad(theta, batch)
        g_i = layout.group_norms(grad)
        group_sq += g_i ** 2
        norms.append(math.sqrt(float(np.sum(g_i ** 2))))
        losses.append(loss)
        if batch is not None:
            errors.append(int(np.sum(np.argmax(obj.outputs(theta, batch), axis=1) != batch[1])))
            sizes.append(len(batch[1]))
    k = len(norms)
    out = {}
    if problem.full_batch:
        out["train_loss"] = losses[0]
    else:
        out["train_loss"] = float(np.dot(losses, sizes) / np.sum(sizes))
        out["train_error"] = float(np.sum(errors) / np.sum(sizes))
        test = problem.eval_batches("test")
        if test:
            t_loss, t_err, t_n = 0.0, 0, 0
            for batch in test:
                l, e = obj.loss_and_errors(theta, batch)
                t_loss += l * len(batch[1])
                t_err += e
                t_n += len(batch[1])
            out["test_loss"] = t_loss / t_n
            out["test_error"] = t_err / t_n
    out["sharpness"] = float(np.mean(norms)) * rho
    out["grad_cov_trace"] = float(np.mean(np.square(norms))) * rho * rho
    report = elr_report_from_norms(layout.group_norms(theta), np.sqrt(group_sq / k), lr)
    out["report"] = report
    return out


def _record(problem, state, lr, min_ratio, max_drift) -> StepRecord:
    m = measure(problem, state.theta, lr)
    rep = m.pop("report")
    cos = math.nan
    if state.prev_theta is not None:
        cos = adjacent_cosine_distance(state.prev_theta, state.theta)
    return StepRecord(step=state.step, epoch=state.epoch, lr=lr, elr=rep.total_elr,
                      eff_grad=rep.total_eff_grad, ess=rep.total_ess, cos_dist=cos,
                      min_prestep_ratio=min_ratio, max_norm_drift=max_drift,
                      rho=rep.group_norms, group_elr=rep.per_group_elr,
                      group_eff_grad=rep.per_group_eff_grad, **m)


def _diverged_record(state: TrainState) -> StepRecord:
    return StepRecord(step=state.step, epoch=state.epoch, train_loss=math.nan)


def current_lr(opt: OptimizerConfig, state: TrainState, clock: int) -> float:
    mult = schedule_value(opt.schedule, clock, opt.rate)
    if opt.mode == "projected-sphere":
        return opt.elr * mult * state.radius ** 2
    if opt.mode == "whole-space-wd":
        return opt.lr * mult
    return opt.step_size * mult


def train(problem: Problem, opt: OptimizerConfig, epochs: int, log_every: int,
          state: TrainState, log_initial: bool = True) -> TrainResult:
    """Run ``epochs`` more epochs from ``state`` (one epoch is one step for full-batch problems).

    A record is logged whenever the epoch counter is a multiple of
    ``log_every``; the starting point is logged when ``log_initial`` is set.
    """
    records: list[StepRecord] = []
    projected = opt.mode != "whole-space-wd"
    min_ratio, max_drift = math.inf, 0.0

    def rate_for_report():
        # random-walk runs have no gradient rate: report a unit ELR. A cosine
        # schedule reaching zero is reported as the smallest positive rate.
        if opt.mode == "random-walk":
            return state.radius ** 2
        return max(current_lr(opt, state, state.epoch), math.ulp(0.0))

    if log_initial:
        records.append(_record(problem, state, rate_for_report(), math.nan, math.nan))
    end_epoch = state.epoch + epochs
    try:
        while state.epoch < end_epoch:
            lr = current_lr(opt, state, state.epoch)
            for batch in problem.epoch_batches(state.batch_rng):
                prev = state.theta
                if opt.mode == "random-walk":
                    new, prenorm = random_walk_update(prev, lr, state.radius, state.walk_rng)
                else:
                    loss, grad = problem.objective.value_and_grad(prev, batch)
                    if not math.isfinite(loss):
                        raise DivergenceError("non-finite loss")
                    if projected:
                        new, prenorm = projected_update(prev, grad, lr, state.radius)
                    else:
                        new = whole_space_update(prev, grad, lr, opt.weight_decay)
                        prenorm = math.nan
                        state.radius = math.sqrt(float(np.dot(new, new)))
                if projected:
                    min_ratio = min(min_ratio, prenorm / state.radius)
                    max_drift = max(max_drift, abs(math.sqrt(float(np.dot(new, new))) - state.radius)
                                    / state.radius)
                state.prev_theta, state.theta = prev, new
                state.step += 1
            state.epoch += 1
            if state.epoch % log_every == 0:
                rec = _record(problem, state, rate_for_report(),
                              min_ratio if projected else math.nan, max_drift if projected else math.nan)
                records.append(rec)
                min_ratio, max_drift = math.inf, 0.0
                if not rec.is_finite():
                    return TrainResult(records, state, True)
    except (DivergenceError, FloatingPointError):
        records.append(_diverged_record(state))
        return TrainResult(records, state, True)
    return TrainResult(records, state, False)

