"""Second-order Taylor posterior over a linear classification head.

Head weights are an ``(o, D)`` matrix (``D`` includes the bias slot when the
features carry a constant column) flattened class-major, i.e. row-major.
Binary heads have ``o = 1`` and use a sigmoid; multiclass heads use a softmax.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.special import expit, log_expit, log_softmax, softmax

from .errors import DimensionMismatch, InvalidLabel, InvalidProbability, NotPSD
from .numerics import RngStream, sample_gaussian, spd_inverse
from .regression import VAR_FLOOR, GaussianPosterior, GradientMoments

ClassKind = Literal["binary", "multiclass"]

DEFAULT_MC_SAMPLES = 1024


@dataclass
class TaylorExpansion:
    """Second-order expansion around ``w_hat``.

    ``c`` is the log-joint at ``w_hat``; ``a`` and ``B`` are the gradient and
    GGN curvature of the negative log-joint there.
    """

    c: float
    a: np.ndarray
    B: np.ndarray
    w_hat: np.ndarray

    def posterior(self, tau: float = 1.0) -> GaussianPosterior:
        cov = spd_inverse(self.B)
        return GaussianPosterior(self.w_hat - cov @ self.a, cov, tau)


def nll_output_hessian(probs, kind: ClassKind) -> np.ndarray:
    """Hessian of the negative log-likelihood w.r.t. the head's logits."""
    p = np.atleast_1d(np.asarray(probs, dtype=float))
    if np.any(p < -1e-8) or np.any(p > 1 + 1e-8):
        raise InvalidProbability(f"probabilities outside [0, 1]: {p}")
    if kind == "binary":
        if p.size != 1:
            raise InvalidProbability("binary head expects a single probability")
        return np.array([[p[0] * (1.0 - p[0])]])
    if abs(p.sum() - 1.0) > 1e-8:
        raise InvalidProbability(f"probabilities sum to {p.sum()}, not 1")
    return np.diag(p) - np.outer(p, p)


def _targets(labels, kind: ClassKind, n_out: int) -> np.ndarray:
    """Label array -> (n, o) target matrix (one-hot for multiclass)."""
    y = np.asarray(labels).reshape(-1)
    if kind == "binary":
        if not np.all((y == 0) | (y == 1)):
            raise InvalidLabel("binary labels must be 0 or 1")
        return y.astype(float)[:, None]
    yi = y.astype(int)
    if np.any(yi != y) or np.any(yi < 0) or np.any(yi >= n_out):
        raise InvalidLabel(f"multiclass labels must be integers in [0, {n_out})")
    return np.eye(n_out)[yi]


def head_probs(weights: np.ndarray, features: np.ndarray, kind: ClassKind) -> np.ndarray:
    """Probabilities ``(n, o)`` of a linear head; binary heads give P(y=1)."""
    logits = features @ weights.T
    return expit(logits) if kind == "binary" else softmax(logits, axis=-1)


def _log_lik(weights: np.ndarray, features: np.ndarray, targets: np.ndarray, kind: ClassKind) -> float:
    logits = features @ weights.T
    if kind == "binary":
        return float(np.sum(targets * log_expit(logits) + (1 - targets) * log_expit(-logits)))
    return float(np.sum(targets * log_softmax(logits, axis=-1)))


def taylor_expansion(w_hat: np.ndarray, features: np.ndarray, labels, prior: GaussianPosterior,
                     kind: ClassKind) -> TaylorExpansion:
    """Gradient and GGN curvature of the negative log-joint at ``w_hat``.

    For a linear head the Jacobian of the logits w.r.t. the flattened weights
    is ``I_o kron h^T``, so each example contributes ``H_i kron h h^T``.
    """
    w_hat = np.atleast_2d(np.asarray(w_hat, dtype=float))
    n_out, D = w_hat.shape
    feats = np.asarray(features, dtype=float).reshape(-1, D)
    if prior.dim != n_out * D:
        raise DimensionMismatch(f"prior dim {prior.dim} != head size {n_out * D}")
    t = _targets(labels, kind, n_out)
    if t.shape[0] != feats.shape[0]:
        raise DimensionMismatch("features and labels have different lengths")
    w_flat = w_hat.reshape(-1)
    prior_prec = spd_inverse(prior.cov)
    diff = w_flat - prior.mean

    p = head_probs(w_hat, feats, kind)
    grad_lik = ((p - t).T @ feats).reshape(-1)
    if kind == "binary":
        hess_out = (p * (1 - p))[:, :, None]
    else:
        hess_out = np.einsum("na,ab->nab", p, np.eye(n_out)) - p[:, :, None] * p[:, None, :]
    ggn = np.einsum("nab,ni,nj->aibj", hess_out, feats, feats).reshape(n_out * D, n_out * D)

    B = 0.5 * (ggn + ggn.T) + prior_prec
    a = grad_lik + prior_prec @ diff
    _, logdet = np.linalg.slogdet(prior.cov)
    log_prior = -0.5 * (diff @ prior_prec @ diff + logdet + prior.dim * np.log(2 * np.pi))
    c = _log_lik(w_hat, feats, t, kind) + log_prior
    return TaylorExpansion(c, a, B, w_flat)


def taylor_posterior(w_hat: np.ndarray, features: np.ndarray, labels, prior: GaussianPosterior,
                     kind: ClassKind) -> GaussianPosterior:
    """Gaussian ``N(w_hat - B^-1 a, B^-1)``: one Newton step with GGN curvature."""
    exp = taylor_expansion(w_hat, features, labels, prior, kind)
    try:
        return exp.posterior(prior.tau)
    except NotPSD as err:  # pragma: no cover - prior precision keeps B positive definite
        raise AssertionError("GGN curvature plus prior precision must be positive definite") from err


def sample_heads(post: GaussianPosterior, n_out: int, n_samples: int, rng: RngStream) -> np.ndarray:
    """``n_samples`` head matrices ``(J, o, D)`` drawn from the weight posterior."""
    draws = sample_gaussian(post.mean, post.cov, n_samples, rng)
    return draws.reshape(n_samples, n_out, -1)


def mc_moments_from_samples(heads: np.ndarray, features: np.ndarray, labels, kind: ClassKind,
                            hidden_dim: int | None = None, eps: float = VAR_FLOOR,
                            full: bool = False) -> GradientMoments:
    """Monte-Carlo moments of ``dl/dh = W^T (p - y)`` for every row of ``features``.

    All examples share the same sampled heads. ``hidden_dim`` drops trailing
    (bias) columns from the returned gradient.
    """
    J, n_out, D = heads.shape
    feats = np.asarray(features, dtype=float).reshape(-1, D)
    t = _targets(labels, kind, n_out)
    d = D if hidden_dim is None else hidden_dim
    logits = np.einsum("nd,jod->jno", feats, heads)
    p = expit(logits) if kind == "binary" else softmax(logits, axis=-1)
    grads = np.einsum("jno,jod->jnd", p - t[None], heads[:, :, :d])
    mu = grads.mean(axis=0)
    if full:
        second = np.einsum("jnd,jne->nde", grads, grads) / J
    else:
        second = np.mean(grads**2, axis=0)
    return GradientMoments.from_raw(mu, second, eps)


def mc_gradient_moments(post: GaussianPosterior, h_i: np.ndarray, y_i, kind: ClassKind,
                        n_samples: int = DEFAULT_MC_SAMPLES, rng: RngStream | None = None,
                        full: bool = True, eps: float = VAR_FLOOR) -> GradientMoments:
    """Monte-Carlo moments of the hidden-layer gradient for a single example.

    ``h_i`` is the (possibly bias-augmented) feature vector; the gradient is
    taken w.r.t. every coordinate of it.
    """
    if n_samples < 2:
        raise ValueError("need at least two Monte-Carlo samples")
    rng = RngStream(0) if rng is None else rng
    h_i = np.asarray(h_i, dtype=float).reshape(-1)
    D = h_i.size
    if post.dim % D:
        raise DimensionMismatch(f"posterior dim {post.dim} is not a multiple of feature dim {D}")
    n_out = post.dim // D
    heads = sample_heads(post, n_out, n_samples, rng)
    t = _targets([y_i], kind, n_out)[0]
    logits = heads @ h_i
    p = expit(logits) if kind == "binary" else softmax(logits, axis=-1)
    grads = np.einsum("jo,jod->jd", p - t, heads)
    mu = grads.mean(axis=0)
    second = grads.T @ grads / n_samples if full else np.mean(grads**2, axis=0)
    return GradientMoments.from_raw(mu, second, eps)
