"""Precision-weighted combination of per-task hidden-layer gradient moments."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np
from scipy.special import softmax

from .errors import EmptyTasks
from .numerics import spd_solve
from .regression import VAR_FLOOR, GradientMoments


@dataclass
class AggregationConfig:
    """``s`` tempers the precisions; it may be one value or one per task."""

    s: float | Sequence[float] = 1.0
    mode: Literal["diagonal", "full"] = "diagonal"
    epsilon: float = VAR_FLOOR

    def __post_init__(self):
        s = np.atleast_1d(np.asarray(self.s, dtype=float))
        if np.any(s < 0) or np.any(s > 1):
            raise ValueError(f"s must lie in [0, 1], got {self.s}")

    def exponents(self, n_tasks: int) -> np.ndarray:
        s = np.atleast_1d(np.asarray(self.s, dtype=float))
        if s.size == 1:
            return np.full(n_tasks, s[0])
        if s.size != n_tasks:
            raise ValueError(f"got {s.size} exponents for {n_tasks} tasks")
        return s


def tempered_weights(var: np.ndarray, s: np.ndarray, epsilon: float = VAR_FLOOR) -> np.ndarray:
    """Weights ``alpha_k = lambda_k^s_k / sum_j lambda_j^s_j`` along axis 0.

    Computed as a softmax of ``-s_k log(var_k)`` so tiny variances cannot overflow.
    ``s = 0`` gives uniform weights.
    """
    var = np.asarray(var, dtype=float)
    s = np.asarray(s, dtype=float).reshape((-1,) + (1,) * (var.ndim - 1))
    log_prec = -np.log(np.maximum(var, epsilon))
    return softmax(s * log_prec, axis=0)


def aggregate_diagonal_batch(mu: np.ndarray, var: np.ndarray, s, epsilon: float = VAR_FLOOR):
    """Aggregate stacked moments ``mu``/``var`` of shape ``(K, ..., d)``.

    Returns the combined gradient (task axis removed) and the weights ``alpha``.
    """
    mu = np.asarray(mu, dtype=float)
    if mu.shape[0] == 0:
        raise EmptyTasks("need at least one task to aggregate")
    s = np.broadcast_to(np.asarray(s, dtype=float), (mu.shape[0],))
    alpha = tempered_weights(var, s, epsilon)
    return np.sum(alpha * mu, axis=0), alpha


def aggregate_diagonal(moments: Sequence[GradientMoments], cfg: AggregationConfig | None = None):
    """Per-dimension precision-weighted mean of the task gradient means."""
    cfg = cfg or AggregationConfig()
    if len(moments) == 0:
        raise EmptyTasks("need at least one task to aggregate")
    mu = np.stack([m.mu for m in moments])
    var = np.stack([1.0 / m.precision for m in moments])
    return aggregate_diagonal_batch(mu, var, cfg.exponents(len(moments)), cfg.epsilon)


def aggregate_full(moments: Sequence[GradientMoments], epsilon: float = VAR_FLOOR) -> np.ndarray:
    """Maximizer of ``prod_k N(g | mu_k, Sigma_k)`` with full covariances.

    Experimental: sums of inverted covariance estimates are noise-sensitive.
    """
    if len(moments) == 0:
        raise EmptyTasks("need at least one task to aggregate")
    d = moments[0].mu.shape[-1]
    total_prec = np.zeros((d, d))
    total_rhs = np.zeros(d)
    for mom in moments:
        cov = mom.covariance()
        idx = np.diag_indices(d)
        cov[idx] = np.maximum(cov[idx], epsilon)
        lam = spd_solve(cov, np.eye(d))
        lam = 0.5 * (lam + lam.T)
        total_prec += lam
        total_rhs += lam @ mom.mu
    return spd_solve(total_prec, total_rhs)


def weight_summary(alpha: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean weight over dimensions for each (task, example), and the batch mean per task.

    ``alpha`` has shape ``(K, n, d)`` (or ``(K, d)`` for a single example).
    """
    alpha = np.asarray(alpha, dtype=float)
    if alpha.ndim == 2:
        alpha = alpha[:, None, :]
    per_example = alpha.mean(axis=-1)
    return per_example, per_example.mean(axis=-1)
