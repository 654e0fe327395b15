"""Loss-weighting baselines (LS, SI, RLW, DWA) and per-example PCGrad."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import softmax

from .errors import UnknownMethod

WEIGHTING_METHODS = ("ls", "si", "rlw", "dwa")
SI_LOSS_FLOOR = 1e-8


@dataclass
class BaselineState:
    method: str
    n_tasks: int
    temperature: float = 2.0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    history: list[np.ndarray] = field(default_factory=list)

    def record_epoch(self, mean_losses) -> None:
        """Store an epoch's mean task losses, keeping the two most recent."""
        self.history.append(np.asarray(mean_losses, dtype=float))
        del self.history[:-2]


def baseline_weights(method: str, losses, state: BaselineState | None = None) -> np.ndarray:
    """Per-task loss weights for a weighting baseline.

    SI returns ``1/l_k``, the gradient scale of ``sum_k log l_k``. DWA is
    uniform until two epochs of history exist.
    """
    losses = np.asarray(losses, dtype=float)
    K = losses.shape[0]
    method = method.lower()
    if method == "ls":
        return np.ones(K)
    if method == "si":
        return 1.0 / np.maximum(losses, SI_LOSS_FLOOR)
    if method == "rlw":
        rng = state.rng if state is not None else np.random.default_rng()
        return softmax(rng.standard_normal(K))
    if method == "dwa":
        if state is None or len(state.history) < 2:
            return np.ones(K)
        prev, prev2 = state.history[-1], state.history[-2]
        ratio = prev / np.maximum(prev2, SI_LOSS_FLOOR)
        return K * softmax(ratio / state.temperature)
    raise UnknownMethod(f"unknown weighting method {method!r}")


def pcgrad_combine(grads: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
    """Project each task gradient off the others it conflicts with, then average.

    ``grads`` is ``(K, d)``. Each task visits the other tasks in a random order
    and removes the component along any gradient with a negative dot product.
    """
    grads = np.atleast_2d(np.asarray(grads, dtype=float))
    K = grads.shape[0]
    rng = rng or np.random.default_rng(0)
    surgered = grads.copy()
    for k in range(K):
        for j in rng.permutation(K):
            if j == k:
                continue
            dot = surgered[k] @ grads[j]
            if dot < 0:
                surgered[k] -= dot / (grads[j] @ grads[j]) * grads[j]
    return surgered.mean(axis=0)


def pcgrad_batch(task_grads: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Apply :func:`pcgrad_combine` to every example of a ``(K, n, d)`` stack."""
    return np.stack([pcgrad_combine(task_grads[:, i], rng) for i in range(task_grads.shape[1])])
