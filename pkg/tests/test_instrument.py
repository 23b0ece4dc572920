import math

import numpy as np
import pytest

from sphere_regimes.core import DegeneratePointError, GroupedParams
from sphere_regimes.instrument import (R1, R2, R3, UNDETERMINED, InsufficientDataError, StepRecord,
                                       adjacent_cosine_distance, classify_regime, early_peak,
                                       equilibration_stats, grad_cov_trace, linear_interpolation_probe,
                                       rank_correlation, sharpness_mean_grad_norm, tail_records, tail_slice)
from sphere_regimes.toy import ToySystem

CHANCE = math.log(3)


def records(losses, steps_per_record=10, cos=0.001):
    return [StepRecord(step=i * steps_per_record, epoch=i, train_loss=float(v), cos_dist=cos)
            for i, v in enumerate(losses)]


def test_convergence():
    t = np.arange(400)
    assert classify_regime(records(1.1 * np.exp(-t / 20)), CHANCE).label == R1


def test_equilibrium_plateau():
    rng = np.random.default_rng(0)
    t = np.arange(400)
    loss = 0.3 + 0.8 * np.exp(-t / 20) + 0.03 * rng.standard_normal(400)
    lab = classify_regime(records(loss), CHANCE)
    assert lab.label == R2
    assert abs(lab.evidence["tail_slope"]) < 1e-5


def test_divergence_by_band_by_decorrelation_and_by_nan():
    rng = np.random.default_rng(1)
    noisy = CHANCE + 0.05 * rng.standard_normal(400)
    assert classify_regime(records(noisy), CHANCE).label == R3
    assert classify_regime(records(np.full(400, 0.3), cos=0.8), CHANCE).label == R3
    loss = np.full(400, 0.3)
    loss[-1] = np.nan
    assert classify_regime(records(loss), CHANCE).label == R3
    assert classify_regime(records(np.full(400, 0.3)), CHANCE, diverged=True).label == R3


def test_slow_drift_is_undetermined():
    # still falling by half over the tail: neither converged nor a plateau
    t = np.arange(400)
    loss = 0.9 - 0.4 * t / 400
    assert classify_regime(records(loss, steps_per_record=1000), CHANCE).label == UNDETERMINED


def test_fixed_convergence_level():
    loss = np.full(400, 1e-3)
    assert classify_regime(records(loss), 3.5, conv_level=1e-4).label == R2
    assert classify_regime(records(loss * 0.01), 3.5, conv_level=1e-4).label == R1


def test_too_few_records():
    with pytest.raises(InsufficientDataError):
        classify_regime(records(np.ones(50)), CHANCE)


def test_tail_spans_enough_steps():
    steps = np.arange(300)            # one step per record: the tail must grow to 1000 steps... or all
    assert tail_slice(steps) == slice(0, 300)
    steps = np.arange(300) * 100
    assert tail_slice(steps) == slice(150, 300)
    recs = records(np.ones(300), steps_per_record=100)
    assert tail_records(recs)[0].step == 15000


def test_equilibration_stats():
    recs = [StepRecord(step=i, epoch=i, train_loss=1.0, group_elr=np.array([0.1, 0.2]),
                       group_eff_grad=np.array([2.0, 1.0])) for i in range(1001)]
    st = equilibration_stats(recs)
    np.testing.assert_allclose(st.mean_ess, [0.2, 0.2])
    assert st.ess_cv == pytest.approx(0.0)
    assert st.as_dict()["mean_elr"] == pytest.approx([0.1, 0.2])
    with pytest.raises(InsufficientDataError):
        equilibration_stats(recs[:10])


def test_cosine_distance():
    assert adjacent_cosine_distance(np.array([1.0, 0.0]), np.array([0.0, 2.0])) == pytest.approx(1.0)
    assert adjacent_cosine_distance(np.array([1.0, 1.0]), np.array([2.0, 2.0])) == pytest.approx(0.0, abs=1e-15)
    assert adjacent_cosine_distance(np.array([1.0, 0.0]), np.array([-1.0, 0.0])) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        adjacent_cosine_distance(np.ones(2), np.ones(3))


def test_sharpness_proxies_by_hand():
    system = ToySystem(np.array([1.0]))
    lay = system.layout
    p = GroupedParams(np.array([3.0, 4.0]), lay, 5.0)
    g = system.grad(p.values)
    # full batch: one "batch"; effective versions scale by rho and rho^2
    assert sharpness_mean_grad_norm(system, p, [None]) == pytest.approx(np.linalg.norm(g) * 5.0)
    assert sharpness_mean_grad_norm(system, p, [None], effective=False) == pytest.approx(np.linalg.norm(g))
    assert grad_cov_trace(system, p, [None, None]) == pytest.approx(np.dot(g, g) * 25.0)
    with pytest.raises(ValueError):
        sharpness_mean_grad_norm(system, p, [])


def test_interpolation_probe():
    system = ToySystem(np.array([1.0, 1.0]))
    lay = system.layout
    a = GroupedParams(np.array([0.6, 0.8, 0.0, 1.0]) / math.sqrt(2), lay, 1.0)
    b = GroupedParams(np.array([-0.6, 0.8, 0.0, 1.0]) / math.sqrt(2), lay, 1.0)
    prof = linear_interpolation_probe(system, a, b, 5, [None])
    assert prof.losses[0] == pytest.approx(0.36) and prof.losses[-1] == pytest.approx(0.36)
    assert prof.losses[2] == 0.0
    assert -0.36 < prof.barrier < 0.0        # the chord dips below both endpoints
    with pytest.raises(DegeneratePointError):
        linear_interpolation_probe(system, a, a.with_values(-a.values), 5, [None])
    with pytest.raises(ValueError):
        linear_interpolation_probe(system, a, b, 2, [None])


def test_early_peak():
    e = np.arange(101)
    bump = 0.5 * np.exp(-e / 5) + 0.2 * np.exp(-((e - 30) / 6) ** 2)
    pk = early_peak(e, bump)
    assert pk.present and abs(pk.epoch - 30) <= 2
    mono = early_peak(e, np.exp(-e / 10))
    assert not mono.present
    with pytest.raises(InsufficientDataError):
        early_peak([0, 1], [1.0, 0.5])


def test_rank_correlation():
    assert rank_correlation([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0)
    assert rank_correlation([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)
