import numpy as np
import pytest

from bayesagg.errors import DimensionMismatch, EmptyInput
from bayesagg.metrics import MetricRecord, brier, calibration, delta_m, ece, task_criteria


def test_delta_m_examples():
    assert delta_m(MetricRecord([1.0, 0.5], [1.0, 1.0], [False, False])) == pytest.approx(-25.0, abs=1e-12)
    assert delta_m(MetricRecord([1.1], [1.0], [True])) == pytest.approx(-10.0, abs=1e-12)
    assert delta_m(MetricRecord([0.3, 0.9], [0.3, 0.9], [False, True])) == 0.0


def test_delta_m_permutation_invariant(rng):
    m, r = rng.uniform(0.5, 2, 5), rng.uniform(0.5, 2, 5)
    hib = rng.random(5) < 0.5
    p = rng.permutation(5)
    assert delta_m(MetricRecord(m, r, hib)) == pytest.approx(delta_m(MetricRecord(m[p], r[p], hib[p])), abs=1e-12)


def test_delta_m_errors():
    with pytest.raises(ZeroDivisionError):
        delta_m(MetricRecord([1.0], [0.0], [False]))
    with pytest.raises(DimensionMismatch):
        MetricRecord([1.0, 2.0], [1.0], [False])


def test_ece_examples():
    assert ece([1.0, 1.0], [1, 1]) == 0.0
    assert abs(ece([0.9, 0.9], [1, 0]) - 0.4) < 1e-12


def test_ece_calibrated_fixture():
    # in each bin the confidence equals the hit rate by construction
    conf = np.repeat([0.25, 0.5, 0.75, 1.0], 4)
    hits = np.array([1, 0, 0, 0, 1, 1, 0, 0, 1, 1, 1, 0, 1, 1, 1, 1])
    assert ece(conf, hits) < 1e-12


def test_ece_bounds(rng):
    v = ece(rng.random(100), rng.random(100) < 0.5)
    assert 0.0 <= v <= 1.0


def test_ece_empty():
    with pytest.raises(EmptyInput):
        ece([], [])


def test_brier_examples():
    assert brier([[0.0, 1.0]], [1]) == 0.0
    assert abs(brier([[0.8, 0.2]], [0]) - 0.08) < 1e-12
    assert abs(brier([[0.5, 0.5]], [1]) - 0.5) < 1e-12


def test_brier_empty():
    with pytest.raises(EmptyInput):
        brier(np.zeros((0, 2)), [])


def test_calibration_binary_column():
    e, b = calibration(np.array([0.8]), [0], "binary")
    assert e == pytest.approx(0.8) and b == pytest.approx(2 * 0.64)


def test_task_criteria():
    assert task_criteria([1.0, 2.0], [1.0, 2.0], "regression") == 0.0
    assert task_criteria([2.0, 3.0], [1.0, 2.0], "regression") == 1.0
    assert task_criteria([[0.1, 0.9], [0.7, 0.3]], [1, 0], "multiclass") == 1.0
    # ties at 0.5 go to class 0, so accuracy is the class-0 share
    assert task_criteria(np.full(4, 0.5), [0, 0, 0, 1], "binary") == 0.75
    with pytest.raises(DimensionMismatch):
        task_criteria([1.0, 2.0, 3.0], [1.0, 2.0], "regression")
