import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lcwof.metrics import (METRIC_KEYS, MetricsReport, accuracy_in_space, aggregate_episodes, arithmetic_mean,
                           harmonic_mean, parse_report)

acc = st.floats(0.0, 1.0)


def test_accuracy_ties_go_to_lowest_index():
    assert accuracy_in_space(np.array([[1.0, 1.0]]), [0]) == 1.0
    assert accuracy_in_space(np.array([[1.0, 1.0]]), [1]) == 0.0


def test_accuracy_validation():
    with pytest.raises(ValueError):
        accuracy_in_space(np.zeros((2, 2)), [0, 2])
    with pytest.raises(ValueError):
        accuracy_in_space(np.zeros((2, 2)), [0], "bogus")
    assert math.isnan(accuracy_in_space(np.zeros((0, 2)), []))


def test_means_worked_example():
    assert harmonic_mean(63.92, 45.61) == pytest.approx(53.24, abs=0.01)
    assert arithmetic_mean(63.92, 45.61) == pytest.approx(54.76, abs=0.01)
    assert harmonic_mean(0.0, 0.0) == 0.0
    with pytest.raises(ValueError):
        harmonic_mean(-0.1, 0.5)


@settings(max_examples=60, deadline=None)
@given(acc, acc)
def test_hm_never_exceeds_am(b, n):
    assert harmonic_mean(b, n) <= arithmetic_mean(b, n) + 1e-12
    assert min(b, n) - 1e-12 <= harmonic_mean(b, n)


def test_report_fills_means_and_text_round_trip():
    r = MetricsReport(0.9, 0.8, 0.7, 0.5, 0.65)
    assert r.hm == pytest.approx(harmonic_mean(0.7, 0.5))
    parsed = parse_report(r.to_text())
    assert set(METRIC_KEYS) <= set(parsed)
    assert parsed["hm"] == pytest.approx(100 * r.hm, abs=0.005)
    assert parsed["episode_count"] == 1


def test_base_only_report_has_nan_means():
    r = MetricsReport(0.9, math.nan, 0.9, math.nan, 0.9)
    assert math.isnan(r.hm) and "hm = nan" in r.to_text()


def test_aggregate_single_episode_has_zero_ci():
    r = aggregate_episodes([MetricsReport(0.9, 0.8, 0.7, 0.5, 0.65)])
    assert r.episode_count == 1 and all(v == 0.0 for v in r.ci95.values())


def test_aggregate_means_and_ci():
    reps = [MetricsReport(1.0, 1.0, b, n, 0.5) for b, n in [(0.8, 0.2), (0.6, 0.4), (0.7, 0.3)]]
    agg = aggregate_episodes(reps)
    assert agg.b_over_j == pytest.approx(0.7) and agg.n_over_j == pytest.approx(0.3)
    assert agg.hm == pytest.approx(np.mean([r.hm for r in reps]))
    assert agg.hm_of_means == pytest.approx(harmonic_mean(0.7, 0.3))
    assert agg.ci95["b_over_j"] == pytest.approx(1.96 * 0.1 / np.sqrt(3))
    with pytest.raises(ValueError):
        aggregate_episodes([])
