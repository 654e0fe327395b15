"""Uncertainty-weighted gradient aggregation for multi-task learning."""

from .aggregator import AggregationConfig, aggregate_diagonal, aggregate_full, weight_summary
from .classification import mc_gradient_moments, nll_output_hessian, taylor_posterior
from .regression import (GaussianPosterior, GradientMoments, epoch_prior_refresh, posterior_update,
                         regression_gradient_moments)
from .trainer import MethodConfig, ModelConfig, TrainConfig, fit

__all__ = [
    "AggregationConfig", "GaussianPosterior", "GradientMoments", "MethodConfig", "ModelConfig",
    "TrainConfig", "aggregate_diagonal", "aggregate_full", "epoch_prior_refresh", "fit",
    "mc_gradient_moments", "nll_output_hessian", "posterior_update", "regression_gradient_moments",
    "taylor_posterior", "weight_summary",
]
