"""Analytic toy objective: a positive combination of x^2 / (x^2 + y^2) terms.

Each pair ``(x_i, y_i)`` is its own scale-invariant group, so the function has
``n`` groups living on one shared sphere. Everything about its dynamics under
projected gradient descent with a fixed effective learning rate is known in
closed form, which makes it the reference system for the regime checks.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DegeneratePointError, GroupLayout, GroupedParams, random_on_sphere


@dataclass(frozen=True, eq=False)
class ToySystem:
    alphas: np.ndarray

    def __post_init__(self):
        alphas = np.array(self.alphas, dtype=np.float64).ravel()
        if alphas.size < 1 or np.any(~(alphas > 0)):
            raise ValueError("all alphas must be positive")
        alphas.setflags(write=False)
        object.__setattr__(self, "alphas", alphas)

    @property
    def n(self) -> int:
        return self.alphas.size

    @property
    def layout(self) -> GroupLayout:
        return GroupLayout.from_sizes([2] * self.n, [f"pair{i}" for i in range(self.n)])

    def _pairs(self, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        theta = np.asarray(theta, dtype=np.float64)
        x, y = theta[0::2], theta[1::2]
        sq = x * x + y * y
        if np.any(sq == 0.0):
            raise DegeneratePointError("an (x, y) pair is at the origin")
        return x, y, sq

    def terms(self, theta: np.ndarray) -> np.ndarray:
        """Per-pair values alpha_i * x_i^2 / (x_i^2 + y_i^2)."""
        x, _, sq = self._pairs(theta)
        return self.alphas * x * x / sq

    def value(self, theta: np.ndarray, batch=None) -> float:
        return float(np.sum(self.terms(theta)))

    def grad(self, theta: np.ndarray) -> np.ndarray:
        x, y, sq = self._pairs(theta)
        coef = 2.0 * self.alphas * x * y / (sq * sq)
        out = np.empty(2 * self.n)
        out[0::2] = coef * y
        out[1::2] = -coef * x
        return out

    def value_and_grad(self, theta: np.ndarray, batch=None) -> tuple[float, np.ndarray]:
        return self.value(theta), self.grad(theta)

    def initial_point(self, seed: int, radius: float = 1.0) -> GroupedParams:
        return random_on_sphere(self.layout, radius, np.random.default_rng(seed))


def toy_value(system: ToySystem, point: GroupedParams) -> float:
    return system.value(point.values)


def toy_gradient(system: ToySystem, point: GroupedParams) -> np.ndarray:
    return system.grad(point.values)


def single_f_contraction(alpha: float, elr: float, r: float) -> float:
    """Factor kappa with |r_next| = kappa * |r| for one pair on the unit circle, r = x / y."""
    a = 2.0 * alpha * elr
    r2 = r * r
    return abs(1.0 - a / (1.0 + a * r2 / (1.0 + r2)))


def fixed_point_ratio_sq(alpha: float, elr: float) -> float:
    """Squared ratio (x/y)^2 at which a single pair stalls when alpha * elr > 1."""
    ae = alpha * elr
    if ae <= 1.0:
        return 0.0
    return (ae - 1.0) / (ae + 1.0)


def single_f_limit(alpha: float, elr: float) -> float:
    """Limit value of alpha * x^2/(x^2+y^2) under a fixed ELR: 0 or (alpha - 1/elr) / 2."""
    return max(0.0, 0.5 * (alpha - 1.0 / elr))


@dataclass(frozen=True, eq=False)
class ToyOracle:
    total_elr: float
    convergence_threshold: float
    equilibrium_elrs: np.ndarray
    equilibrium_value: float
    equilibrium_ess_sq: np.ndarray
    value_lower_bound: float
    asymptotic_chaos_value: float

    @property
    def predicted_regime(self) -> str:
        return "convergence" if self.total_elr < self.convergence_threshold else "equilibrium"


def oracle_for(system: ToySystem, elr: float) -> ToyOracle:
    if not elr > 0:
        raise ValueError("ELR must be positive")
    a = system.alphas
    total = float(np.sum(a))
    eq_elrs = elr * total / a
    eq_value = float(np.sum(np.maximum(0.0, 0.5 * (a - 1.0 / eq_elrs))))
    return ToyOracle(
        total_elr=float(elr),
        convergence_threshold=1.0 / total,
        equilibrium_elrs=eq_elrs,
        equilibrium_value=eq_value,
        equilibrium_ess_sq=(a * eq_elrs) ** 2 - 1.0,
        value_lower_bound=0.5 * (total - 1.0 / elr),
        asymptotic_chaos_value=0.5 * total,
    )


def simulate_pair(alpha: float, elr: float, steps: int, x0: float = 0.6, y0: float = 0.8) -> np.ndarray:
    """Projected gradient descent on a single pair on the unit circle; returns (x, y) per step."""
    system = ToySystem(np.array([alpha]))
    theta = np.array([x0, y0], dtype=np.float64)
    theta /= np.sqrt(np.dot(theta, theta))
    path = np.empty((steps + 1, 2))
    path[0] = theta
    for t in range(steps):
        step = theta - elr * system.grad(theta)
        theta = step / np.sqrt(np.dot(step, step))
        path[t + 1] = theta
    return path
