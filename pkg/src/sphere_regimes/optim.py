"""Update rules: projected SGD on the sphere, whole-space SGD with weight decay,
rate schedules and the Gaussian random-walk baseline."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import MIN_GROUP_NORM, DegeneratePointError, GroupedParams

MODES = ("projected-sphere", "whole-space-wd", "random-walk")
SCHEDULES = ("constant", "cosine", "step-change")


class DivergenceError(FloatingPointError):
    """Parameters or loss became non-finite."""


@dataclass(frozen=True)
class Schedule:
    kind: str = "constant"
    t_max: int | None = None
    at: int | None = None
    new_value: float | None = None

    def __post_init__(self):
        if self.kind not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.kind!r}; expected one of {SCHEDULES}")
        if self.kind == "cosine" and not (self.t_max and self.t_max > 0):
            raise ValueError("cosine schedule needs t_max > 0")
        if self.kind == "step-change":
            if self.at is None or self.at < 0:
                raise ValueError("step-change schedule needs at >= 0")
            if not (self.new_value and self.new_value > 0):
                raise ValueError("step-change schedule needs new_value > 0")


def schedule_value(schedule: Schedule, t: int, base: float = 1.0) -> float:
    """Multiplier applied to the base rate at time ``t``."""
    if t < 0:
        raise ValueError("t must be non-negative")
    if schedule.kind == "constant":
        return 1.0
    if schedule.kind == "cosine":
        if t >= schedule.t_max:
            return 0.0
        return 0.5 * (1.0 + math.cos(math.pi * t / schedule.t_max))
    return 1.0 if t < schedule.at else schedule.new_value / base


@dataclass(frozen=True)
class OptimizerConfig:
    mode: str = "projected-sphere"
    elr: float | None = None
    lr: float | None = None
    weight_decay: float = 0.0
    schedule: Schedule = Schedule()
    step_size: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.mode == "projected-sphere":
            if self.elr is None or not self.elr > 0 or self.lr is not None:
                raise ValueError("projected-sphere needs a positive elr and no lr")
        elif self.mode == "whole-space-wd":
            if self.lr is None or not self.lr > 0 or self.elr is not None:
                raise ValueError("whole-space-wd needs a positive lr and no elr")
        else:
            if self.step_size is None or not self.step_size > 0:
                raise ValueError("random-walk needs a positive step_size")
        if self.mode != "whole-space-wd" and self.weight_decay:
            raise ValueError("weight_decay only applies to whole-space-wd")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.mode != "random-walk" and self.step_size is not None:
            raise ValueError("step_size only applies to random-walk")

    @property
    def rate(self) -> float:
        """The swept rate: ELR on the sphere, LR in whole space, step size for the walk."""
        return {"projected-sphere": self.elr, "whole-space-wd": self.lr,
                "random-walk": self.step_size}[self.mode]


def projected_update(theta: np.ndarray, gradient: np.ndarray, lr: float, radius: float
                     ) -> tuple[np.ndarray, float]:
    """Gradient step then rescale to ``radius``; also returns the pre-projection norm."""
    stepped = theta - lr * gradient
    norm = math.sqrt(float(np.dot(stepped, stepped)))
    if not norm > MIN_GROUP_NORM:
        raise DegeneratePointError("gradient step landed on the origin")
    if not math.isfinite(norm):
        raise DivergenceError("non-finite parameters after the gradient step")
    return stepped * (radius / norm), norm


def projected_sgd_step(params: GroupedParams, gradient: np.ndarray, lr: float) -> GroupedParams:
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    new, _ = projected_update(params.values, np.asarray(gradient, dtype=np.float64), lr, params.radius)
    return params.with_values(new)


def whole_space_update(theta: np.ndarray, gradient: np.ndarray, lr: float, weight_decay: float
                       ) -> np.ndarray:
    new = theta - lr * (gradient + weight_decay * theta)
    if not np.all(np.isfinite(new)):
        raise DivergenceError("non-finite parameters in whole-space step")
    return new


def whole_space_wd_step(params: GroupedParams, gradient: np.ndarray, lr: float,
                        weight_decay: float) -> GroupedParams:
    """Plain SGD with weight decay; the returned radius tracks the new norm."""
    if not lr > 0 or weight_decay < 0:
        raise ValueError("need lr > 0 and weight_decay >= 0")
    new = whole_space_update(params.values, np.asarray(gradient, dtype=np.float64), lr, weight_decay)
    norm = float(np.linalg.norm(new))
    if not norm > MIN_GROUP_NORM:
        raise DegeneratePointError("weight decay collapsed the parameters")
    return GroupedParams(new, params.layout, norm)


def random_walk_update(theta: np.ndarray, step_size: float, radius: float,
                       rng: np.random.Generator) -> tuple[np.ndarray, float]:
    direction = rng.standard_normal(theta.shape[0])
    direction *= step_size / math.sqrt(float(np.dot(direction, direction)))
    return projected_update(theta, direction, 1.0, radius)


def random_walk_step(params: GroupedParams, step_size: float, rng: np.random.Generator) -> GroupedParams:
    """Replace the gradient by an isotropic Gaussian vector of length ``step_size``, then project."""
    if not step_size > 0:
        raise ValueError("step_size must be positive")
    new, _ = random_walk_update(params.values, step_size, params.radius, rng)
    return params.with_values(new)
