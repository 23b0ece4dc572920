"""Grouped parameter vectors on a sphere and the effective learning rate algebra.

A parameter vector ``theta`` of length P is split into contiguous groups, each
of which the objective is invariant to rescaling. Training keeps the *total*
norm fixed at ``radius``; the individual group norms drift, and so do the
per-group effective learning rates ``lr / rho_i**2``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

# Group norms below this are treated as a collapsed (degenerate) point.
MIN_GROUP_NORM = 1e-150
COS_EPS = 1e-30


class DegeneratePointError(ValueError):
    """Raised when a vector or a parameter group has (numerically) zero norm."""


class SIObjective(Protocol):
    """A function that is scale invariant with respect to every group of its layout."""

    layout: "GroupLayout"

    def value(self, theta: np.ndarray, batch=None) -> float: ...

    def value_and_grad(self, theta: np.ndarray, batch=None) -> tuple[float, np.ndarray]: ...


@dataclass(frozen=True)
class GroupLayout:
    spans: tuple[tuple[int, int], ...]
    names: tuple[str, ...] = ()

    def __post_init__(self):
        spans = tuple((int(o), int(n)) for o, n in self.spans)
        if not spans:
            raise ValueError("a layout needs at least one group")
        expected = 0
        for offset, length in spans:
            if length < 1:
                raise ValueError(f"group at offset {offset} has length {length}")
            if offset != expected:
                raise ValueError("group spans must be contiguous, disjoint and start at 0")
            expected = offset + length
        names = tuple(self.names) or tuple(f"group{i}" for i in range(len(spans)))
        if len(names) != len(spans):
            raise ValueError("one name per group is required")
        object.__setattr__(self, "spans", spans)
        object.__setattr__(self, "names", names)

    @classmethod
    def from_sizes(cls, sizes: Sequence[int], names: Sequence[str] = ()) -> "GroupLayout":
        spans, offset = [], 0
        for size in sizes:
            spans.append((offset, int(size)))
            offset += int(size)
        return cls(tuple(spans), tuple(names))

    @property
    def dim(self) -> int:
        offset, length = self.spans[-1]
        return offset + length

    @property
    def n_groups(self) -> int:
        return len(self.spans)

    def slices(self) -> list[slice]:
        return [slice(o, o + n) for o, n in self.spans]

    def group_norms(self, vec: np.ndarray) -> np.ndarray:
        return np.array([np.sqrt(np.dot(vec[s], vec[s])) for s in self.slices()])


@dataclass(frozen=True, eq=False)
class GroupedParams:
    """Immutable parameter vector with its group layout and sphere radius."""

    values: np.ndarray
    layout: GroupLayout
    radius: float

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 1 or values.shape[0] != self.layout.dim:
            raise ValueError(f"expected a vector of length {self.layout.dim}, got shape {values.shape}")
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "radius", float(self.radius))

    def with_values(self, values: np.ndarray) -> "GroupedParams":
        return GroupedParams(values, self.layout, self.radius)

    @property
    def norm(self) -> float:
        return float(np.sqrt(np.dot(self.values, self.values)))

    def group_norms(self) -> np.ndarray:
        return self.layout.group_norms(self.values)

    def group(self, i: int) -> np.ndarray:
        return self.values[self.layout.slices()[i]]

    def on_sphere(self, rtol: float = 1e-12) -> bool:
        return abs(self.norm - self.radius) <= rtol * self.radius


def random_on_sphere(layout: GroupLayout, radius: float, rng: np.random.Generator) -> GroupedParams:
    """Standard normal draw projected onto the sphere (uniform direction)."""
    raw = rng.standard_normal(layout.dim)
    return project_to_sphere(GroupedParams(raw, layout, radius))


def project_to_sphere(params: GroupedParams) -> GroupedParams:
    norm = params.norm
    if not norm > MIN_GROUP_NORM:
        raise DegeneratePointError(f"cannot project a vector of norm {norm!r}")
    return params.with_values(params.values * (params.radius / norm))


@dataclass(frozen=True, eq=False)
class ElrReport:
    """Per-group and total effective learning rates, gradients and step sizes."""

    total_elr: float
    per_group_elr: np.ndarray
    per_group_eff_grad: np.ndarray
    total_eff_grad: float
    weights: np.ndarray
    group_norms: np.ndarray = field(default=None)

    @property
    def per_group_ess(self) -> np.ndarray:
        return self.per_group_elr * self.per_group_eff_grad

    @property
    def total_ess(self) -> float:
        return self.total_elr * self.total_eff_grad

    def elr_identity_residual(self) -> float:
        """Relative residual of sum(1/elr_i) = 1/elr."""
        lhs = float(np.sum(1.0 / self.per_group_elr))
        rhs = 1.0 / self.total_elr
        return abs(lhs - rhs) / abs(rhs)

    def ess_identity_residual(self) -> float:
        """Relative residual of (total ESS)^2 = sum_i w_i ESS_i^2."""
        lhs = self.total_ess ** 2
        rhs = float(np.sum(self.weights * self.per_group_ess ** 2))
        scale = max(abs(lhs), abs(rhs))
        if scale == 0.0:
            return 0.0
        return abs(lhs - rhs) / scale


def elr_report_from_norms(group_norms: np.ndarray, grad_group_norms: np.ndarray, lr: float) -> ElrReport:
    """Build a report from parameter group norms and gradient group norms.

    Any gradient summary whose squared group norms add up to the squared total
    (a single gradient, or a root-mean-square over mini-batches) keeps the
    ELR and ESS identities exact.
    """
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    rho_i = np.asarray(group_norms, dtype=np.float64)
    g_i = np.asarray(grad_group_norms, dtype=np.float64)
    if np.any(rho_i < MIN_GROUP_NORM):
        raise DegeneratePointError("a parameter group has zero norm")
    rho = float(np.sqrt(np.sum(rho_i ** 2)))
    g = float(np.sqrt(np.sum(g_i ** 2)))
    per_group_elr = lr / rho_i ** 2
    total_elr = lr / rho ** 2
    return ElrReport(
        total_elr=total_elr,
        per_group_elr=per_group_elr,
        per_group_eff_grad=g_i * rho_i,
        total_eff_grad=g * rho,
        weights=rho_i ** 2 / rho ** 2,
        group_norms=rho_i,
    )


def compute_elr_report(params: GroupedParams, gradient: np.ndarray, lr: float) -> ElrReport:
    gradient = np.asarray(gradient, dtype=np.float64)
    if gradient.shape != params.values.shape:
        raise ValueError("gradient length does not match the parameters")
    return elr_report_from_norms(params.group_norms(), params.layout.group_norms(gradient), lr)


def predict_next_elr(report: ElrReport) -> np.ndarray:
    """Per-group ELRs after one full-batch projected gradient step.

    Groups whose effective step exceeds the total one get a smaller ELR, and
    vice versa.
    """
    return report.per_group_elr * (1.0 + report.total_ess ** 2) / (1.0 + report.per_group_ess ** 2)


def orthogonality(params: GroupedParams, gradient: np.ndarray) -> np.ndarray:
    """Per-group normalized |<theta_i, grad_i>|; zero for exactly scale-invariant objectives."""
    out = []
    for s in params.layout.slices():
        th, gr = params.values[s], gradient[s]
        denom = np.sqrt(np.dot(th, th)) * np.sqrt(np.dot(gr, gr)) + COS_EPS
        out.append(abs(np.dot(th, gr)) / denom)
    return np.array(out)


def scale_group(values: np.ndarray, layout: GroupLayout, group_index: int, c: float) -> np.ndarray:
    out = np.array(values, dtype=np.float64)
    out[layout.slices()[group_index]] *= c
    return out


@dataclass(frozen=True)
class InvarianceCheck:
    value_deviation: float
    output_deviation: float
    grad_rel_deviation: float

    @property
    def max_deviation(self) -> float:
        return max(self.value_deviation, self.output_deviation)


def check_scale_invariance(objective, params: GroupedParams, group_index: int, c: float,
                           batch=None) -> InvarianceCheck:
    """Scale one group by ``c`` and compare value, outputs and gradient.

    ``output_deviation`` is the max-abs change of ``objective.outputs`` (the
    logits of a network) when the objective has such a method, otherwise it
    equals the value deviation. ``grad_rel_deviation`` measures the gradient
    against the law ``grad_i(c theta) = grad_i(theta) / c``; the other groups
    must keep their gradient unchanged.
    """
    if not c > 0:
        raise ValueError("scale must be positive")
    layout = params.layout
    base_val, base_grad = objective.value_and_grad(params.values, batch)
    scaled = scale_group(params.values, layout, group_index, c)
    val, grad = objective.value_and_grad(scaled, batch)
    value_dev = abs(val - base_val)
    if hasattr(objective, "outputs"):
        out_dev = float(np.max(np.abs(objective.outputs(scaled, batch) - objective.outputs(params.values, batch))))
    else:
        out_dev = value_dev
    expected = np.array(base_grad)
    expected[layout.slices()[group_index]] /= c
    denom = np.linalg.norm(expected)
    diff = np.linalg.norm(grad - expected)
    grad_rel = diff / denom if denom > 0 else diff
    return InvarianceCheck(value_dev, out_dev, float(grad_rel))
