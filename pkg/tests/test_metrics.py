from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from feddepth.errors import EvaluationError, InvalidArgument
from feddepth.metrics import (
    GB,
    comm_lower_bound,
    comm_upper_bound,
    depth_errors,
    evaluate_depth,
    median_scale_align,
    region_split_errors,
    steps_centralized,
    steps_federated,
)

OMEGA = 0.2075 * GB


def test_upper_bound_examples():
    assert comm_upper_bound(1, 1, 1) == 2
    assert comm_upper_bound(12, 10, OMEGA) / GB == pytest.approx(49.8, rel=1e-12)
    assert comm_upper_bound(12, 10, 0) == 0


def test_lower_bound_examples():
    assert comm_lower_bound(12, 10, 1, OMEGA) == comm_upper_bound(12, 10, OMEGA)
    assert comm_lower_bound(12, 10, Fraction(1, 2), OMEGA) / GB == pytest.approx(24.9, rel=1e-12)
    assert comm_upper_bound(1, 1, OMEGA) / GB == pytest.approx(0.415, rel=1e-12)
    for bad in (0, -0.5, 1.5):
        with pytest.raises(InvalidArgument):
            comm_lower_bound(1, 1, bad, 1)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 50), st.integers(1, 50), st.integers(1, 6), st.integers(0, 10**9))
def test_bounds_match_loop_and_are_ordered(T, C, denom, omega):
    F = Fraction(1, denom)
    upper = sum(2 * omega for _ in range(T) for _ in range(C))
    assert comm_upper_bound(T, C, omega) == upper
    lower = comm_lower_bound(T, C, F, omega)
    assert lower == Fraction(upper) * F
    assert lower <= upper
    assert (lower == upper) == (denom == 1 or T * omega == 0)


def test_step_examples():
    assert steps_centralized(100, 1000) == 100_000
    assert steps_centralized(0, 1000) == 0
    assert steps_centralized(1, 1) == 1
    rounds = [{p: (3, 1000) for p in range(5)} for _ in range(12)]
    assert steps_federated(rounds) == 180_000
    assert steps_federated([{0: (1, 1)}]) == 1


@settings(max_examples=50, deadline=None)
@given(st.lists(st.dictionaries(st.integers(0, 9), st.tuples(st.integers(0, 5), st.integers(0, 100))), max_size=8))
def test_steps_federated_matches_loop(records):
    total = 0
    for rec in records:
        for epochs, batches in rec.values():
            for _ in range(epochs):
                total += batches
    assert steps_federated(records) == total


def test_median_scaling_examples():
    gt = np.array([1.0, 2.0, 3.0, 4.0])
    valid = np.ones(4, dtype=bool)
    assert np.array_equal(median_scale_align(2 * gt, gt, valid), gt)
    pred = np.array([4.0, 4.0, 4.0])
    assert np.allclose(median_scale_align(pred, np.array([2.0, 2.0, 2.0]), np.ones(3, bool)), 2.0)
    with pytest.raises(EvaluationError):
        median_scale_align(pred, pred, np.zeros(3, bool))


def test_even_count_median_is_mean_of_middle_values():
    gt = np.array([1.0, 2.0, 4.0, 8.0])
    pred = np.ones(4)
    # gt median = 3, pred median = 1
    assert np.allclose(median_scale_align(pred, gt, np.ones(4, bool)), 3.0)


def test_depth_error_examples():
    gt = np.array([1.0, 2.0, 3.0])
    perfect = depth_errors(gt, gt)
    assert perfect.abs_rel == perfect.sq_rel == perfect.rms == perfect.rms_log == 0
    assert perfect.delta1 == perfect.delta2 == perfect.delta3 == 1
    assert depth_errors(np.array([2.0, 2.0, 2.0]), gt).abs_rel == pytest.approx(4 / 9, abs=1e-15)
    with pytest.raises(EvaluationError):
        depth_errors(gt, np.zeros(3))


def test_ground_truth_beyond_cap_is_clipped():
    gt = np.array([10.0, 120.0])
    m = depth_errors(np.array([10.0, 80.0]), gt)
    assert m.abs_rel == 0 and m.count == 2


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_scaled_metrics_invariant_to_rescaling(seed, k):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(0.5, 80, (6, 7))
    pred = gt * rng.uniform(0.5, 2, (6, 7))
    a, b = evaluate_depth(pred, gt).as_dict(), evaluate_depth(k * pred, gt).as_dict()
    for key in a:
        assert abs(a[key] - b[key]) < 1e-9


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_delta_thresholds_are_ordered(seed):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(0.5, 80, 50)
    m = depth_errors(gt * np.exp(rng.normal(0, 0.5, 50)), gt)
    assert 0 <= m.delta1 <= m.delta2 <= m.delta3 <= 1


def test_region_split():
    rng = np.random.default_rng(0)
    gt = rng.uniform(1, 50, (5, 5))
    pred = gt * rng.uniform(0.8, 1.2, (5, 5))
    dynamic, static = region_split_errors(pred, gt, np.zeros((5, 5), bool))
    assert dynamic is None
    assert static.as_dict() == depth_errors(pred, gt).as_dict()
    both = region_split_errors(gt, gt, rng.uniform(0, 1, (5, 5)) > 0.5)
    assert all(m.abs_rel == 0 and m.rms == 0 for m in both)
