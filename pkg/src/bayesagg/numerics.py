"""Dense linear algebra, Gaussian sampling and finite differences."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import linalg

from .errors import NotPSD

# jitter ladder tried after a plain factorization fails
JITTER_LADDER = (1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


@dataclass(frozen=True)
class RngStream:
    """Immutable descriptor of a reproducible random stream.

    Distinct ``stream_id`` values map to independent ``SeedSequence`` children,
    so every (example, task) computation can own a deterministic sub-stream.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.PCG64(seq))

    def child(self, *keys: int) -> "RngStream":
        # fold extra keys into the stream id deterministically
        ss = np.random.SeedSequence(entropy=(self.seed, self.stream_id, *keys))
        return RngStream(self.seed, int(ss.generate_state(1, dtype=np.uint64)[0]))


def _symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def cholesky_jittered(a: np.ndarray, jitter: float = 0.0) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``a + jitter*I``, escalating jitter on failure.

    Returns the factor and the jitter actually used.
    """
    a = _symmetrize(np.asarray(a, dtype=float))
    eye = np.eye(a.shape[0])
    ladder = [jitter] + [j for j in JITTER_LADDER if j > jitter]
    for jit in ladder:
        try:
            return linalg.cholesky(a + jit * eye, lower=True), jit
        except linalg.LinAlgError:
            continue
    raise NotPSD(f"matrix not positive definite even with jitter {ladder[-1]:g}", ladder[-1])


def spd_solve(a: np.ndarray, b: np.ndarray, jitter: float = 0.0) -> np.ndarray:
    """Solve ``(a + jitter*I) x = b`` for symmetric PSD ``a`` via Cholesky."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    chol, _ = cholesky_jittered(a, jitter)
    return linalg.cho_solve((chol, True), np.asarray(b, dtype=float))


def spd_inverse(a: np.ndarray, jitter: float = 0.0) -> np.ndarray:
    inv = spd_solve(a, np.eye(np.asarray(a).shape[0]), jitter)
    return _symmetrize(inv)


def psd_factor(cov: np.ndarray, jitter: float = 0.0) -> np.ndarray:
    """A matrix ``L`` with ``L @ L.T == cov`` for PSD ``cov``.

    Cholesky is tried first. Singular but PSD inputs (e.g. a zero covariance)
    fall back to a clipped eigendecomposition so the factor stays exact;
    clearly indefinite inputs raise ``NotPSD``.
    """
    cov = _symmetrize(np.asarray(cov, dtype=float))
    try:
        return linalg.cholesky(cov + jitter * np.eye(cov.shape[0]), lower=True)
    except linalg.LinAlgError:
        pass
    vals, vecs = np.linalg.eigh(cov)
    scale = max(float(np.max(np.abs(vals))), 1.0)
    if vals.min() < -JITTER_LADDER[-1] * scale:
        raise NotPSD(f"covariance has eigenvalue {vals.min():.3g}", JITTER_LADDER[-1])
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def sample_gaussian(mean: np.ndarray, cov: np.ndarray, n: int, rng: RngStream | np.random.Generator) -> np.ndarray:
    """Draw ``n`` samples (rows) from N(mean, cov)."""
    mean = np.asarray(mean, dtype=float)
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    factor = psd_factor(cov)
    z = gen.standard_normal((n, mean.shape[0]))
    return mean + z @ factor.T


def finite_diff(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    for j in range(x.size):
        step = np.zeros(x.size)
        step[j] = eps
        step = step.reshape(x.shape)
        flat[j] = (f(x + step) - f(x - step)) / (2 * eps)
    return grad
