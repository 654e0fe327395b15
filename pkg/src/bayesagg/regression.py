"""Conjugate Bayesian linear regression over a task head and its gradient moments.

Feature matrices are laid out row-per-example, shape ``(n, d)``. When the head
carries a bias, callers pass features with an appended constant-1 column.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch
from .numerics import spd_inverse

VAR_FLOOR = 1e-12


@dataclass
class GaussianPosterior:
    mean: np.ndarray
    cov: np.ndarray
    tau: float = 1.0

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.cov = np.asarray(self.cov, dtype=float)
        if self.cov.shape != (self.dim, self.dim):
            raise DimensionMismatch(f"mean has dim {self.dim} but cov has shape {self.cov.shape}")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def isotropic(cls, dim: int, variance: float = 1.0, tau: float = 1.0) -> "GaussianPosterior":
        return cls(np.zeros(dim), variance * np.eye(dim), tau)

    def copy(self) -> "GaussianPosterior":
        return GaussianPosterior(self.mean.copy(), self.cov.copy(), self.tau)


@dataclass
class GradientMoments:
    """First two moments of a hidden-layer gradient.

    ``second`` is either the full ``E[g g^T]`` or only its diagonal. Batched
    moments stack examples along the leading axis.
    """

    mu: np.ndarray
    second: np.ndarray
    var: np.ndarray
    precision: np.ndarray

    @classmethod
    def from_raw(cls, mu: np.ndarray, second: np.ndarray, eps: float = VAR_FLOOR) -> "GradientMoments":
        diag = second if second.shape == mu.shape else np.diagonal(second, axis1=-2, axis2=-1)
        var = np.maximum(diag - mu**2, eps)
        return cls(mu, second, var, 1.0 / var)

    @property
    def is_full(self) -> bool:
        return self.second.shape != self.mu.shape

    def covariance(self) -> np.ndarray:
        if not self.is_full:
            return np.apply_along_axis(np.diag, -1, self.var)
        return self.second - self.mu[..., :, None] * self.mu[..., None, :]

    def truncate(self, dim: int) -> "GradientMoments":
        """Keep the leading ``dim`` coordinates (drops the bias slot)."""
        if self.is_full:
            second = self.second[..., :dim, :dim]
        else:
            second = self.second[..., :dim]
        return GradientMoments(self.mu[..., :dim], second, self.var[..., :dim], self.precision[..., :dim])


def posterior_update(features: np.ndarray, targets: np.ndarray, prior: GaussianPosterior,
                     tau: float | None = None) -> GaussianPosterior:
    """Exact Gaussian posterior of a linear head under Gaussian noise ``tau``."""
    features = np.atleast_2d(np.asarray(features, dtype=float))
    targets = np.asarray(targets, dtype=float).reshape(-1)
    tau = prior.tau if tau is None else tau
    if targets.size == 0:
        return prior.copy()
    if features.shape != (targets.size, prior.dim):
        raise DimensionMismatch(f"features {features.shape} incompatible with {targets.size} targets "
                                f"and posterior dim {prior.dim}")
    prior_prec = spd_inverse(prior.cov)
    prec = prior_prec + features.T @ features / tau**2
    cov = spd_inverse(prec)
    mean = cov @ (prior_prec @ prior.mean + features.T @ targets / tau**2)
    return GaussianPosterior(mean, cov, tau)


def epoch_prior_refresh(all_features: np.ndarray, all_targets: np.ndarray, base_prior: GaussianPosterior,
                        tau: float | None = None) -> GaussianPosterior:
    """Full-data posterior from the isotropic base prior, used as next epoch's prior."""
    return posterior_update(all_features, all_targets, base_prior, tau)


def _check_dims(post: GaussianPosterior, h: np.ndarray):
    if h.shape[-1] != post.dim:
        raise DimensionMismatch(f"feature dim {h.shape[-1]} != posterior dim {post.dim}")


def regression_moments_batch(post: GaussianPosterior, features: np.ndarray, targets: np.ndarray,
                             full: bool = False, eps: float = VAR_FLOOR) -> GradientMoments:
    """Closed-form moments of ``g = 2 w (h^T w - y)`` with ``w ~ post``, per row.

    ``full=False`` returns only the diagonal of ``E[g g^T]``.
    """
    h = np.atleast_2d(np.asarray(features, dtype=float))
    y = np.asarray(targets, dtype=float).reshape(-1)
    _check_dims(post, h)
    m, S = post.mean, post.cov
    P = S + np.outer(m, m)
    a = h @ P                      # (S + M) h, rows
    hm = h @ m                     # h^T m
    hSh = np.einsum("ni,ij,nj->n", h, S, h)  # Tr(A S)
    mu = 2.0 * (a - y[:, None] * m)
    if full:
        M = np.outer(m, m)
        y_ = y[:, None, None]
        cross = (m[None, :, None] * a[:, None, :] + a[:, :, None] * m[None, None, :]
                 + hm[:, None, None] * (S - M))
        quart = (2.0 * a[:, :, None] * a[:, None, :] + hSh[:, None, None] * P
                 + (hm**2)[:, None, None] * (S - M))
        second = 4.0 * (y_**2 * P - 2.0 * y_ * cross + quart)
    else:
        Pd, Sd = np.diag(P), np.diag(S)
        cross = 2.0 * m * a + hm[:, None] * (Sd - m**2)
        quart = 2.0 * a**2 + hSh[:, None] * Pd + (hm**2)[:, None] * (Sd - m**2)
        second = 4.0 * ((y**2)[:, None] * Pd - 2.0 * y[:, None] * cross + quart)
    return GradientMoments.from_raw(mu, second, eps)


def regression_gradient_moments(post: GaussianPosterior, h_i: np.ndarray, y_i: float,
                                full: bool = True, eps: float = VAR_FLOOR) -> GradientMoments:
    h_i = np.asarray(h_i, dtype=float).reshape(-1)
    _check_dims(post, h_i)
    batch = regression_moments_batch(post, h_i[None, :], np.array([y_i]), full=full, eps=eps)
    return GradientMoments(batch.mu[0], batch.second[0], batch.var[0], batch.precision[0])
