import numpy as np
import pytest
from scipy.optimize import brentq, minimize

from bayesagg.aggregator import (AggregationConfig, aggregate_diagonal, aggregate_diagonal_batch,
                                 aggregate_full, tempered_weights, weight_summary)
from bayesagg.errors import EmptyTasks
from bayesagg.regression import GradientMoments

from conftest import random_spd


def moments_from(mu, cov):
    mu = np.asarray(mu, dtype=float)
    cov = np.asarray(cov, dtype=float)
    if cov.ndim == mu.ndim:
        return GradientMoments.from_raw(mu, cov + mu**2)
    return GradientMoments.from_raw(mu, cov + np.outer(mu, mu))


def diag_moments(mu, prec):
    return moments_from(mu, 1.0 / np.asarray(prec, dtype=float))


def random_instance(rng, K=None, d=None):
    K = K or int(rng.integers(1, 6))
    d = d or int(rng.integers(1, 7))
    mus = rng.standard_normal((K, d))
    covs = [random_spd(rng, d, scale=rng.uniform(0.1, 3.0), ridge=0.2) for _ in range(K)]
    return mus, covs


def test_equal_precisions_average():
    g, alpha = aggregate_diagonal([diag_moments([1, 0], [1, 1]), diag_moments([0, 1], [1, 1])],
                                  AggregationConfig(s=1.0))
    np.testing.assert_allclose(g, [0.5, 0.5], atol=1e-15)
    np.testing.assert_allclose(alpha, [[0.5, 0.5], [0.5, 0.5]], atol=1e-15)


def test_unequal_precisions_by_hand():
    g, _ = aggregate_diagonal([diag_moments([1, 0], [3, 1]), diag_moments([0, 1], [1, 3])], AggregationConfig(s=1.0))
    np.testing.assert_allclose(g, [0.75, 0.75], atol=1e-12)


def test_zero_exponent_is_uniform_mean(rng):
    mus = rng.standard_normal((3, 4))
    moms = [diag_moments(m, rng.uniform(0.01, 100, 4)) for m in mus]
    g, alpha = aggregate_diagonal(moms, AggregationConfig(s=0.0))
    np.testing.assert_allclose(g, mus.mean(axis=0), atol=1e-14)
    np.testing.assert_allclose(alpha, 1 / 3, atol=1e-15)


def test_tiny_variances_do_not_overflow():
    alpha = tempered_weights(np.array([[1e-300], [1e-200]]), np.array([1.0, 1.0]), epsilon=0.0)
    assert np.all(np.isfinite(alpha))
    np.testing.assert_allclose(alpha.sum(axis=0), 1.0)


def test_full_single_task_is_its_mean(rng):
    mu, cov = rng.standard_normal(4), random_spd(rng, 4)
    np.testing.assert_allclose(aggregate_full([moments_from(mu, cov)]), mu, atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_full_with_diagonal_covariances_matches_diagonal(seed):
    rng = np.random.default_rng(seed)
    K, d = int(rng.integers(1, 6)), int(rng.integers(1, 7))
    mus = rng.standard_normal((K, d))
    vars_ = rng.uniform(0.1, 5.0, (K, d))
    full = aggregate_full([moments_from(m, np.diag(v)) for m, v in zip(mus, vars_)])
    diag, _ = aggregate_diagonal([moments_from(m, v) for m, v in zip(mus, vars_)], AggregationConfig(s=1.0))
    np.testing.assert_allclose(full, diag, atol=1e-10)


@pytest.mark.parametrize("seed", range(20))
def test_full_matches_numerical_minimizer(seed):
    rng = np.random.default_rng(seed)
    mus, covs = random_instance(rng)
    precs = [np.linalg.inv(c) for c in covs]

    def objective(g):
        return sum(0.5 * (g - m) @ P @ (g - m) for m, P in zip(mus, precs))

    def grad(g):
        return sum(P @ (g - m) for m, P in zip(mus, precs))

    res = minimize(objective, np.zeros(mus.shape[1]), jac=grad, method="BFGS", options={"gtol": 1e-11})
    g = aggregate_full([moments_from(m, c) for m, c in zip(mus, covs)])
    np.testing.assert_allclose(g, res.x, atol=1e-6)


@pytest.mark.parametrize("seed", range(20))
def test_diagonal_minimizes_weighted_squares(seed):
    rng = np.random.default_rng(seed)
    K, d = int(rng.integers(1, 6)), int(rng.integers(1, 7))
    mus = rng.standard_normal((K, d))
    precs = rng.uniform(0.1, 10.0, (K, d))
    g, _ = aggregate_diagonal([diag_moments(m, p) for m, p in zip(mus, precs)], AggregationConfig(s=1.0))
    for j in range(d):
        foc = lambda x: np.sum(precs[:, j] * (x - mus[:, j]))
        root = brentq(foc, mus[:, j].min() - 1, mus[:, j].max() + 1, xtol=1e-15, rtol=4 * np.finfo(float).eps)
        assert abs(g[j] - root) < 1e-10


@pytest.mark.parametrize("seed", range(10))
def test_convex_combination_and_normalization(seed):
    rng = np.random.default_rng(seed)
    mus = rng.standard_normal((4, 5))
    var = rng.uniform(1e-6, 1e3, (4, 5))
    g, alpha = aggregate_diagonal_batch(mus, var, rng.uniform(0.1, 1.0))
    assert np.all(g >= mus.min(axis=0) - 1e-12) and np.all(g <= mus.max(axis=0) + 1e-12)
    np.testing.assert_allclose(alpha.sum(axis=0), 1.0, atol=1e-12)
    assert np.all(alpha >= 0)


def test_common_precision_scale_is_irrelevant(rng):
    mus = rng.standard_normal((3, 4))
    var = rng.uniform(0.1, 2.0, (3, 4))
    g1, _ = aggregate_diagonal_batch(mus, var, 0.85)
    g2, _ = aggregate_diagonal_batch(mus, var * 37.0, 0.85)
    np.testing.assert_allclose(g1, g2, atol=1e-14)


def test_identical_means(rng):
    mu = rng.standard_normal(5)
    g, _ = aggregate_diagonal_batch(np.tile(mu, (3, 1)), rng.uniform(0.1, 3, (3, 5)), 0.5)
    np.testing.assert_allclose(g, mu, atol=1e-14)


def test_batched_over_examples(rng):
    mus = rng.standard_normal((2, 6, 3))
    var = rng.uniform(0.1, 2.0, (2, 6, 3))
    g, _ = aggregate_diagonal_batch(mus, var, [0.3, 0.9])
    for i in range(6):
        gi, _ = aggregate_diagonal([moments_from(mus[k, i], var[k, i]) for k in range(2)],
                                   AggregationConfig(s=[0.3, 0.9]))
        np.testing.assert_allclose(g[i], gi, atol=1e-14)


def test_weight_summary_examples():
    per, batch = weight_summary(np.full((4, 3, 5), 0.25))
    np.testing.assert_allclose(per, 0.25)
    np.testing.assert_allclose(batch, 0.25)
    per, _ = weight_summary(np.array([[1.0, 0.0], [0.0, 1.0]]))
    np.testing.assert_allclose(per[:, 0], [0.5, 0.5])


def test_weight_summary_sums_to_one(rng):
    _, alpha = aggregate_diagonal_batch(rng.standard_normal((3, 7, 4)), rng.uniform(0.1, 2, (3, 7, 4)), 1.0)
    per, batch = weight_summary(alpha)
    np.testing.assert_allclose(per.sum(axis=0), 1.0, atol=1e-12)
    np.testing.assert_allclose(batch.sum(), 1.0, atol=1e-12)


def test_errors():
    with pytest.raises(EmptyTasks):
        aggregate_diagonal([])
    with pytest.raises(EmptyTasks):
        aggregate_full([])
    with pytest.raises(ValueError):
        AggregationConfig(s=1.5)
    with pytest.raises(ValueError):
        AggregationConfig(s=[0.5, 0.5]).exponents(3)
