"""Fully-connected shared trunk with linear task heads.

Batches are row-major: ``x`` is ``(n, d_x)`` and the hidden representation
``h`` is ``(n, d_h)``. Head matrices are ``(o, d_h + 1)`` with the bias in the
last column, applied to ``[h, 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from scipy.special import expit, softmax

from .errors import DimensionMismatch, InvalidLabel, TraceMismatch

Activation = Literal["relu", "elu", "tanh", "identity"]
TaskKind = Literal["regression", "binary", "multiclass"]


def _act(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "elu":
        return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))
    if kind == "tanh":
        return np.tanh(z)
    if kind == "identity":
        return z
    raise ValueError(f"unknown activation {kind!r}")


def _act_grad(kind: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return (z > 0).astype(float)
    if kind == "elu":
        return np.where(z > 0, 1.0, a + 1.0)
    if kind == "tanh":
        return 1.0 - a**2
    return np.ones_like(z)


@dataclass
class TrunkParams:
    weights: list[np.ndarray]   # each (out, in)
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise DimensionMismatch("weights, biases and activations must have equal length")
        for prev, nxt in zip(self.weights, self.weights[1:]):
            if nxt.shape[1] != prev.shape[0]:
                raise DimensionMismatch(f"layer shapes {prev.shape} -> {nxt.shape} are incompatible")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.weights[-1].shape[0]

    @classmethod
    def init(cls, input_dim: int, widths: Sequence[int], activation: str | Sequence[str] = "elu",
             rng: np.random.Generator | None = None) -> "TrunkParams":
        """Uniform(+-1/sqrt(fan_in)) initialization."""
        rng = rng or np.random.default_rng(0)
        acts = [activation] * len(widths) if isinstance(activation, str) else list(activation)
        weights, biases = [], []
        fan_in = input_dim
        for width in widths:
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(width, fan_in)))
            biases.append(rng.uniform(-bound, bound, size=width))
            fan_in = width
        return cls(weights, biases, acts)

    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def with_params(self, flat: Sequence[np.ndarray]) -> "TrunkParams":
        flat = list(flat)
        return TrunkParams(flat[0::2], flat[1::2], list(self.activations))

    def copy(self) -> "TrunkParams":
        return self.with_params([p.copy() for p in self.params()])


@dataclass(frozen=True)
class ForwardTrace:
    inputs: np.ndarray
    pre: tuple[np.ndarray, ...]
    post: tuple[np.ndarray, ...]

    @property
    def hidden(self) -> np.ndarray:
        return self.post[-1]


@dataclass
class TaskHead:
    name: str
    kind: TaskKind
    weights: np.ndarray = field(repr=False)

    @property
    def n_outputs(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def init(cls, name: str, kind: TaskKind, hidden_dim: int, n_outputs: int = 1,
             rng: np.random.Generator | None = None) -> "TaskHead":
        rng = rng or np.random.default_rng(0)
        if kind == "binary":
            n_outputs = 1
        bound = 1.0 / np.sqrt(hidden_dim)
        return cls(name, kind, rng.uniform(-bound, bound, size=(n_outputs, hidden_dim + 1)))

    def copy(self) -> "TaskHead":
        return TaskHead(self.name, self.kind, self.weights.copy())


def augment(h: np.ndarray) -> np.ndarray:
    """Append the constant-1 bias feature."""
    h = np.atleast_2d(h)
    return np.concatenate([h, np.ones((h.shape[0], 1))], axis=1)


def forward(x: np.ndarray, trunk: TrunkParams) -> ForwardTrace:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != trunk.input_dim:
        raise DimensionMismatch(f"input dim {x.shape[1]} != trunk input dim {trunk.input_dim}")
    pre, post = [], []
    a = x
    for W, b, act in zip(trunk.weights, trunk.biases, trunk.activations):
        z = a @ W.T + b
        a = _act(act, z)
        pre.append(z)
        post.append(a)
    return ForwardTrace(x, tuple(pre), tuple(post))


def head_logits(h: np.ndarray, head: TaskHead) -> np.ndarray:
    h = np.atleast_2d(h)
    if h.shape[1] + 1 != head.weights.shape[1]:
        raise DimensionMismatch(f"hidden dim {h.shape[1]} does not match head {head.weights.shape}")
    return augment(h) @ head.weights.T


def head_forward(h: np.ndarray | ForwardTrace, head: TaskHead) -> np.ndarray:
    """Regression values, P(y=1) for binary heads, or class probabilities; shape ``(n, o)``."""
    if isinstance(h, ForwardTrace):
        h = h.hidden
    z = head_logits(h, head)
    if head.kind == "regression":
        return z
    if head.kind == "binary":
        return expit(z)
    return softmax(z, axis=-1)


def _targets(head: TaskHead, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y)
    if head.kind == "regression":
        return y.astype(float).reshape(-1, head.n_outputs)
    y = y.reshape(-1)
    if head.kind == "binary":
        if not np.all((y == 0) | (y == 1)):
            raise InvalidLabel(f"task {head.name}: binary labels must be 0 or 1")
        return y.astype(float)[:, None]
    yi = y.astype(int)
    if np.any(yi != y) or np.any(yi < 0) or np.any(yi >= head.n_outputs):
        raise InvalidLabel(f"task {head.name}: class ids must lie in [0, {head.n_outputs})")
    return np.eye(head.n_outputs)[yi]


def task_loss(head: TaskHead, h: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-example loss: squared error summed over outputs, or cross-entropy."""
    out = head_forward(h, head)
    t = _targets(head, y)
    if head.kind == "regression":
        return np.sum((out - t) ** 2, axis=1)
    p = np.clip(out, 1e-12, 1 - 1e-12)
    if head.kind == "binary":
        return -(t * np.log(p) + (1 - t) * np.log(1 - p))[:, 0]
    return -np.sum(t * np.log(p), axis=1)


def output_residual(head: TaskHead, h: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Derivative of the per-example loss w.r.t. the head's logits, ``(n, o)``."""
    out = head_forward(h, head)
    t = _targets(head, y)
    if head.kind == "regression":
        return 2.0 * (out - t)
    return out - t


def hidden_gradient(head: TaskHead, h: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-example gradient of the task loss w.r.t. ``h``, shape ``(n, d_h)``.

    Multi-output regression sums the per-output gradients.
    """
    single = np.ndim(h) == 1
    r = output_residual(head, h, y)
    g = r @ head.weights[:, :-1]
    return g[0] if single else g


def head_gradient(head: TaskHead, h: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of the batch-mean task loss w.r.t. the head matrix."""
    r = output_residual(head, h, y)
    return r.T @ augment(h) / r.shape[0]


def backprop_shared(g_batch: np.ndarray, trace: ForwardTrace, trunk: TrunkParams) -> list[np.ndarray]:
    """Batch-mean vector-Jacobian product ``(1/n) sum_i g_i dh_i/dtheta``.

    Returns gradients aligned with ``trunk.params()``.
    """
    g = np.atleast_2d(np.asarray(g_batch, dtype=float))
    if len(trace.pre) != len(trunk.weights) or g.shape != trace.hidden.shape:
        raise TraceMismatch(f"gradient {g.shape} does not match trace hidden {trace.hidden.shape}")
    n = g.shape[0]
    grads: list[np.ndarray] = []
    delta = g
    for layer in range(len(trunk.weights) - 1, -1, -1):
        z, a = trace.pre[layer], trace.post[layer]
        delta = delta * _act_grad(trunk.activations[layer], z, a)
        inp = trace.post[layer - 1] if layer > 0 else trace.inputs
        grads.append(delta.sum(axis=0) / n)
        grads.append(delta.T @ inp / n)
        delta = delta @ trunk.weights[layer]
    return grads[::-1]
