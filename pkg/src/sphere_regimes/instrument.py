"""Measurements along a trajectory: sharpness proxies, regime labels,
equilibration statistics and loss-landscape probes."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import COS_EPS, DegeneratePointError, GroupedParams, project_to_sphere

R1 = "R1-convergence"
R2 = "R2-equilibrium"
R3 = "R3-divergence"
UNDETERMINED = "boundary-undetermined"
REGIME_ORDER = {R1: 1, R2: 2, R3: 3}

# Classifier thresholds.
CONV_FRACTION = 0.05        # R1 level: fraction of the initial loss ...
CE_CONV_FLOOR = 0.05        # ... floored at this value for cross-entropy
CHANCE_BAND = 0.10          # relative half-width of the random-guess band
SLOPE_TOL = 1e-5            # plateau: |least-squares slope| per optimizer step ...
PLATEAU_DRIFT = 0.10        # ... and fitted change across the tail <= 10% of the tail mean
DECORRELATED_COS = 0.5      # R3: adjacent iterates at least 60 degrees apart on average
MIN_POINTS = 200
MIN_TAIL_STEPS = 1000


class InsufficientDataError(ValueError):
    pass


@dataclass
class StepRecord:
    step: int
    epoch: int
    train_loss: float
    train_error: float = math.nan
    test_loss: float = math.nan
    test_error: float = math.nan
    lr: float = math.nan
    elr: float = math.nan
    eff_grad: float = math.nan
    ess: float = math.nan
    sharpness: float = math.nan
    grad_cov_trace: float = math.nan
    cos_dist: float = math.nan
    min_prestep_ratio: float = math.nan
    max_norm_drift: float = math.nan
    rho: np.ndarray = field(default_factory=lambda: np.zeros(0))
    group_elr: np.ndarray = field(default_factory=lambda: np.zeros(0))
    group_eff_grad: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def group_ess(self) -> np.ndarray:
        return self.group_elr * self.group_eff_grad

    def is_finite(self) -> bool:
        return math.isfinite(self.train_loss)


def sharpness_mean_grad_norm(objective, params: GroupedParams, batches: Sequence, effective: bool = True) -> float:
    """Mean over mini-batches of the stochastic gradient norm (times the parameter norm if effective)."""
    if len(batches) < 1:
        raise ValueError("need at least one batch")
    norms = [np.linalg.norm(objective.value_and_grad(params.values, b)[1]) for b in batches]
    scale = params.norm if effective else 1.0
    return float(np.mean(norms)) * scale


def grad_cov_trace(objective, params: GroupedParams, batches: Sequence, effective: bool = True) -> float:
    """Mean over mini-batches of the squared stochastic gradient norm."""
    if len(batches) < 1:
        raise ValueError("need at least one batch")
    sq = [float(np.sum(objective.value_and_grad(params.values, b)[1] ** 2)) for b in batches]
    scale = params.norm ** 2 if effective else 1.0
    return float(np.mean(sq)) * scale


def adjacent_cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("vectors differ in dimension")
    cos = float(np.dot(a, b)) / (math.sqrt(float(np.dot(a, a))) * math.sqrt(float(np.dot(b, b))) + COS_EPS)
    return min(2.0, max(0.0, 1.0 - cos))


@dataclass(frozen=True)
class RegimeLabel:
    label: str
    evidence: dict

    def __str__(self) -> str:
        return self.label


def tail_slice(steps: np.ndarray) -> slice:
    """Last half of the records, extended so it spans at least MIN_TAIL_STEPS optimizer steps."""
    n = len(steps)
    start = n // 2
    while start > 0 and steps[-1] - steps[start] < MIN_TAIL_STEPS:
        start -= 1
    return slice(start, n)


def classify_regime(records: Sequence[StepRecord], chance_level: float, conv_floor: float = CE_CONV_FLOOR,
                    initial_loss: float | None = None, diverged: bool = False,
                    conv_level: float | None = None) -> RegimeLabel:
    """Label a training trajectory as convergence, equilibrium, divergence or undetermined.

    ``chance_level`` is the loss of a random guess (ln C for cross-entropy).
    The convergence level is ``conv_level`` when given, otherwise a fraction
    of the initial loss floored at ``conv_floor``. Divergence covers three
    signatures: a non-finite loss, a tail at or above the random-guess band,
    and adjacent iterates that are decorrelated like a random walk.
    """
    if len(records) < MIN_POINTS:
        raise InsufficientDataError(f"need at least {MIN_POINTS} records, got {len(records)}")
    losses = np.array([r.train_loss for r in records], dtype=np.float64)
    steps = np.array([r.step for r in records], dtype=np.float64)
    if initial_loss is None:
        initial_loss = float(losses[0])
    tau_conv = conv_level if conv_level is not None else max(CONV_FRACTION * initial_loss, conv_floor)
    lo, hi = chance_level * (1 - CHANCE_BAND), chance_level * (1 + CHANCE_BAND)
    if diverged or not np.all(np.isfinite(losses)):
        return RegimeLabel(R3, {"non_finite": True, "tau_conv": tau_conv})

    tail = tail_slice(steps)
    y, t = losses[tail], steps[tail]
    mean = float(np.mean(y))
    std = float(np.std(y))
    slope = float(np.polyfit(t - t[0], y, 1)[0]) if np.ptp(t) > 0 else 0.0
    rel_std = std / mean if mean > 0 else 0.0
    cos = np.array([r.cos_dist for r in records], dtype=np.float64)[tail]
    cos = cos[np.isfinite(cos)]
    mean_cos = float(np.mean(cos)) if cos.size else 0.0
    evidence = {"tail_mean": mean, "tail_std": std, "tail_rel_std": rel_std, "tail_slope": slope,
                "tail_cos_dist": mean_cos, "tau_conv": tau_conv, "chance_band": [lo, hi],
                "tail_points": int(len(y))}

    if mean >= lo or mean_cos >= DECORRELATED_COS:
        label = R3
    elif mean < tau_conv and slope <= SLOPE_TOL:
        label = R1
    elif abs(slope) < SLOPE_TOL and abs(slope) * float(np.ptp(t)) <= PLATEAU_DRIFT * mean:
        label = R2
    else:
        label = UNDETERMINED
    return RegimeLabel(label, evidence)


@dataclass(frozen=True, eq=False)
class EquilibrationStats:
    mean_elr: np.ndarray
    mean_eff_grad: np.ndarray
    mean_ess: np.ndarray
    mean_ess_sq: np.ndarray
    ess_cv: float

    def as_dict(self) -> dict:
        return {"mean_elr": self.mean_elr.tolist(), "mean_eff_grad": self.mean_eff_grad.tolist(),
                "mean_ess": self.mean_ess.tolist(), "mean_ess_sq": self.mean_ess_sq.tolist(),
                "ess_cv": self.ess_cv}


def equilibration_stats(records: Sequence[StepRecord], min_steps: int = MIN_TAIL_STEPS) -> EquilibrationStats:
    """Time averages of per-group ELR, effective gradient and ESS over the given tail."""
    if not records or records[-1].step - records[0].step < min_steps - 1:
        raise InsufficientDataError(f"tail must span at least {min_steps} steps")
    elr = np.array([r.group_elr for r in records])
    eg = np.array([r.group_eff_grad for r in records])
    ess = elr * eg
    mean_ess = ess.mean(axis=0)
    m = float(np.mean(mean_ess))
    cv = float(np.std(mean_ess) / m) if m > 0 else 0.0
    return EquilibrationStats(elr.mean(axis=0), eg.mean(axis=0), mean_ess, (ess ** 2).mean(axis=0), cv)


def tail_records(records: Sequence[StepRecord]) -> list[StepRecord]:
    steps = np.array([r.step for r in records])
    return list(records)[tail_slice(steps)]


@dataclass(frozen=True, eq=False)
class InterpolationProfile:
    taus: np.ndarray
    losses: np.ndarray

    @property
    def barrier(self) -> float:
        """Highest interior loss minus the higher endpoint loss."""
        return float(np.max(self.losses[1:-1]) - max(self.losses[0], self.losses[-1]))


def linear_interpolation_probe(objective, params_a: GroupedParams, params_b: GroupedParams,
                               num_points: int, batches: Sequence) -> InterpolationProfile:
    """Loss along the chord between two points, each pulled back onto the sphere."""
    if num_points < 3:
        raise ValueError("need at least 3 points")
    if params_a.layout != params_b.layout or not math.isclose(params_a.radius, params_b.radius, rel_tol=1e-12):
        raise ValueError("endpoints must share layout and radius")
    taus = np.linspace(0.0, 1.0, num_points)
    losses = []
    for tau in taus:
        mix = (1.0 - tau) * params_a.values + tau * params_b.values
        if np.linalg.norm(mix) < 1e-12 * params_a.radius:
            raise DegeneratePointError(f"interpolation path passes through the origin at tau={tau}")
        point = project_to_sphere(params_a.with_values(mix))
        losses.append(mean_loss(objective, point.values, batches))
    return InterpolationProfile(taus, np.array(losses))


def mean_loss(objective, theta: np.ndarray, batches: Sequence) -> float:
    """Sample-weighted mean loss over batches (a single ``None`` batch for full-batch objectives)."""
    total, count = 0.0, 0
    for b in batches:
        n = 1 if b is None else len(b[1])
        total += objective.value(theta, b) * n
        count += n
    return total / count


def rank_correlation(a: Sequence[float], b: Sequence[float]) -> float:
    from scipy.stats import spearmanr
    return float(spearmanr(a, b).statistic)


@dataclass(frozen=True)
class EarlyPeak:
    epoch: int
    height: float      # prominence: smaller of the rise before and the fall after

    @property
    def present(self) -> bool:
        return self.height > 0.0


def early_peak(epochs: Sequence[int], values: Sequence[float], window: int = 5,
               horizon: float = 0.5) -> EarlyPeak:
    """Locate the descent / rise / second-descent bump of a training curve.

    The curve (without its starting point) is smoothed with a centred moving
    average of ``window`` points. Each point's prominence is the smaller of
    its rise above the lowest earlier value and its drop to the lowest later
    value; the peak is the most prominent point within the first ``horizon``
    fraction of training. A monotone curve has height 0.
    """
    e = np.asarray(epochs, dtype=np.int64)
    v = np.asarray(values, dtype=np.float64)
    keep = e > 0
    e, v = e[keep], v[keep]
    if len(v) < 3:
        raise InsufficientDataError("too few points after the starting record")
    w = max(1, min(window, len(v)))
    padded = np.pad(v, (w // 2, w - 1 - w // 2), mode="edge")
    smooth = np.convolve(padded, np.ones(w) / w, mode="valid")
    rise = smooth - np.minimum.accumulate(smooth)
    fall = smooth - np.minimum.accumulate(smooth[::-1])[::-1]
    prominence = np.minimum(rise, fall)
    early = e <= e[-1] * horizon
    i = int(np.argmax(np.where(early, prominence, -np.inf)))
    return EarlyPeak(int(e[i]), float(prominence[i]))
