"""Training loop: LS pre-training, uncertainty-weighted aggregation steps, baselines, evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from . import metrics as M
from .aggregator import aggregate_diagonal_batch, aggregate_full, weight_summary
from .baselines import BaselineState, baseline_weights, pcgrad_batch
from .classification import mc_moments_from_samples, sample_heads, taylor_posterior
from .data import Dataset, TaskSpec, denormalize
from .errors import NotTrained, UnknownMethod
from .network import (TaskHead, TrunkParams, augment, backprop_shared, forward, head_forward,
                      head_gradient, hidden_gradient, task_loss)
from .numerics import RngStream
from .regression import VAR_FLOOR, GaussianPosterior, GradientMoments, posterior_update, regression_moments_batch

log = logging.getLogger(__name__)

METHODS = ("bayesagg", "ls", "si", "rlw", "dwa", "pcgrad")


@dataclass
class MethodConfig:
    name: str = "bayesagg"
    s_regression: float = 0.85
    s_classification: float = 0.005
    mc_samples: int = 1024
    prior_variance: float = 1.0
    tau: float = 1.0
    newton_damping: float = 1.0
    mode: Literal["diagonal", "full"] = "diagonal"
    dwa_temperature: float = 2.0
    epsilon: float = VAR_FLOOR

    def __post_init__(self):
        self.name = self.name.lower()
        if self.name not in METHODS:
            raise UnknownMethod(f"unknown method {self.name!r}; expected one of {', '.join(METHODS)}")


@dataclass
class ModelConfig:
    widths: tuple[int, ...] = (32, 16)
    activation: str = "elu"


@dataclass
class TrainConfig:
    epochs: int = 30
    pretrain_epochs: int = 5
    batch_size: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    scheduler: Literal["none", "step", "plateau"] = "none"
    plateau_patience: int = 5
    plateau_factor: float = 0.5
    method: MethodConfig = field(default_factory=MethodConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.method.name == "bayesagg" and not 0 <= self.pretrain_epochs < self.epochs:
            raise ValueError("pretrain_epochs must be in [0, epochs)")


# --------------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])

    def copy(self) -> "AdamState":
        return AdamState([a.copy() for a in self.m], [a.copy() for a in self.v], self.t)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState, lr: float,
              weight_decay: float = 0.0, betas: tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8) -> list[np.ndarray]:
    """Bias-corrected Adam with decoupled weight decay; updates ``state`` in place."""
    b1, b2 = betas
    state.t += 1
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        m_hat = state.m[i] / (1 - b1**state.t)
        v_hat = state.v[i] / (1 - b2**state.t)
        new = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        if weight_decay:
            new = new - lr * weight_decay * p
        out.append(new)
    return out


# --------------------------------------------------------------------------- state

@dataclass
class Unit:
    """One aggregation unit: a classification task or a single regression output."""

    task: str
    output: int
    kind: str
    label: str


def aggregation_units(tasks: Sequence[TaskSpec]) -> list[Unit]:
    units = []
    for t in tasks:
        if t.kind == "regression":
            for j in range(t.n_outputs):
                label = t.name if t.n_outputs == 1 else f"{t.name}[{j}]"
                units.append(Unit(t.name, j, t.kind, label))
        else:
            units.append(Unit(t.name, 0, t.kind, t.name))
    return units


@dataclass
class TrainState:
    tasks: list[TaskSpec]
    trunk: TrunkParams
    heads: dict[str, TaskHead]
    trunk_opt: AdamState
    head_opt: dict[str, AdamState]
    config: TrainConfig
    rng: np.random.Generator
    mc_stream: RngStream
    lr: float
    priors: dict[str, list[GaussianPosterior]] = field(default_factory=dict)
    buffer: list[tuple[np.ndarray, dict[str, np.ndarray]]] = field(default_factory=list)
    baseline: BaselineState | None = None
    step: int = 0
    epoch: int = 0
    phase: str = "pretrain"
    ready: bool = False

    @property
    def units(self) -> list[Unit]:
        return aggregation_units(self.tasks)

    def base_prior(self, task: TaskSpec) -> GaussianPosterior:
        D = self.trunk.hidden_dim + 1
        dim = D if task.kind == "regression" else self.heads[task.name].weights.size
        return GaussianPosterior.isotropic(dim, self.config.method.prior_variance, self.config.method.tau)


def init_state(tasks: Sequence[TaskSpec], input_dim: int, model: ModelConfig, config: TrainConfig) -> TrainState:
    rng = np.random.default_rng(config.seed)
    trunk = TrunkParams.init(input_dim, model.widths, model.activation, rng)
    heads = {t.name: TaskHead.init(t.name, t.kind, trunk.hidden_dim, t.n_outputs, rng) for t in tasks}
    state = TrainState(
        tasks=list(tasks), trunk=trunk, heads=heads,
        trunk_opt=AdamState.zeros_like(trunk.params()),
        head_opt={k: AdamState.zeros_like([h.weights]) for k, h in heads.items()},
        config=config, rng=rng, mc_stream=RngStream(config.seed, 1),
        lr=config.learning_rate,
    )
    name = config.method.name
    if name in ("ls", "si", "rlw", "dwa"):
        state.baseline = BaselineState(name, len(tasks), config.method.dwa_temperature, rng)
    return state


def _batches(state: TrainState, n: int):
    order = state.rng.permutation(n)
    bs = state.config.batch_size
    for start in range(0, n, bs):
        yield order[start:start + bs]


def _apply_trunk(state: TrainState, grads: list[np.ndarray]) -> None:
    cfg = state.config
    new = adam_step(state.trunk.params(), grads, state.trunk_opt, state.lr, cfg.weight_decay, cfg.betas, cfg.eps)
    state.trunk = state.trunk.with_params(new)


def _apply_head(state: TrainState, name: str, grad: np.ndarray) -> None:
    cfg = state.config
    head = state.heads[name]
    (head.weights,) = adam_step([head.weights], [grad], state.head_opt[name], state.lr, 0.0, cfg.betas, cfg.eps)


# --------------------------------------------------------------------------- baseline / LS steps

def weighted_step(state: TrainState, xb: np.ndarray, yb: dict[str, np.ndarray], method: str = "ls") -> np.ndarray:
    """One step of a loss-weighting baseline or PCGrad; returns the per-task batch losses."""
    trace = forward(xb, state.trunk)
    h = trace.hidden
    losses = np.array([task_loss(state.heads[t.name], h, yb[t.name]).mean() for t in state.tasks])
    task_grads = np.stack([hidden_gradient(state.heads[t.name], h, yb[t.name]) for t in state.tasks])
    if method == "pcgrad":
        weights = np.ones(len(state.tasks))
        g = pcgrad_batch(task_grads, state.rng)
    else:
        weights = baseline_weights(method, losses, state.baseline)
        g = np.tensordot(weights, task_grads, axes=1)
    for w, t in zip(weights, state.tasks):
        _apply_head(state, t.name, w * head_gradient(state.heads[t.name], h, yb[t.name]))
    _apply_trunk(state, backprop_shared(g, trace, state.trunk))
    state.step += 1
    return losses


def pretrain(state: TrainState, x: np.ndarray, labels: dict[str, np.ndarray], epochs: int) -> TrainState:
    """Joint LS training of trunk and heads for ``epochs`` passes.

    With ``epochs=0`` nothing changes and no random numbers are consumed.
    """
    for _ in range(epochs):
        run_epoch(state, x, labels, "ls")
    return state


# --------------------------------------------------------------------------- BayesAgg

@dataclass
class Direction:
    """Everything one aggregation step computes before parameters move."""

    trace: object
    hidden_grad: np.ndarray           # (n, d_h)
    alpha: np.ndarray                 # (U, n, d_h)
    moments: list[GradientMoments]   # per unit, diagonal, hidden coordinates only
    posteriors: dict[str, list[GaussianPosterior]]
    trunk_grads: list[np.ndarray]
    losses: np.ndarray


def _unit_exponents(state: TrainState) -> np.ndarray:
    mc = state.config.method
    return np.array([mc.s_regression if u.kind == "regression" else mc.s_classification for u in state.units])


def bayesagg_direction(state: TrainState, xb: np.ndarray, yb: dict[str, np.ndarray],
                       priors: dict[str, list[GaussianPosterior]] | None = None) -> Direction:
    """Batch posteriors, per-example gradient moments and the aggregated trunk gradient.

    Pure with respect to ``state`` apart from consuming the Monte-Carlo stream index.
    """
    mc = state.config.method
    priors = state.priors if priors is None else priors
    trace = forward(xb, state.trunk)
    h = trace.hidden
    hb = augment(h)
    d = h.shape[1]
    full = mc.mode == "full"
    moments: list[GradientMoments] = []
    posts: dict[str, list[GaussianPosterior]] = {}
    losses = []
    for ti, task in enumerate(state.tasks):
        y = yb[task.name]
        if task.kind == "regression":
            y = y.reshape(len(h), -1)
            posts[task.name] = []
            sq = 0.0
            for j in range(task.n_outputs):
                post = posterior_update(hb, y[:, j], priors[task.name][j], mc.tau)
                posts[task.name].append(post)
                mom = regression_moments_batch(post, hb, y[:, j], full=full, eps=mc.epsilon)
                moments.append(mom.truncate(d))
                sq = sq + (hb @ post.mean - y[:, j]) ** 2
            losses.append(float(np.mean(sq)))
        else:
            head = state.heads[task.name]
            post = taylor_posterior(head.weights, hb, y, priors[task.name][0], task.kind)
            posts[task.name] = [post]
            stream = state.mc_stream.child(state.step, ti)
            samples = sample_heads(post, head.n_outputs, mc.mc_samples, stream)
            moments.append(mc_moments_from_samples(samples, hb, y, task.kind, hidden_dim=d,
                                                   eps=mc.epsilon, full=full))
            losses.append(float(task_loss(head, h, y).mean()))

    s = _unit_exponents(state)
    mu = np.stack([m.mu for m in moments])
    var = np.stack([m.var for m in moments])
    g, alpha = aggregate_diagonal_batch(mu, var, s, mc.epsilon)
    if full:
        g = np.stack([
            aggregate_full([GradientMoments(m.mu[i], m.second[i], m.var[i], m.precision[i]) for m in moments],
                           mc.epsilon)
            for i in range(h.shape[0])
        ])
    grads = backprop_shared(g, trace, state.trunk)
    return Direction(trace, g, alpha, moments, posts, grads, np.array(losses))


def train_step_bayesagg(state: TrainState, xb: np.ndarray, yb: dict[str, np.ndarray]) -> Direction:
    """Aggregated trunk update plus a damped Newton move of each classification head.

    Priors are read, never written; the batch's features join the epoch buffer.
    """
    direction = bayesagg_direction(state, xb, yb)
    _apply_trunk(state, direction.trunk_grads)
    damping = state.config.method.newton_damping
    for task in state.tasks:
        if task.kind != "regression":
            head = state.heads[task.name]
            target = direction.posteriors[task.name][0].mean.reshape(head.weights.shape)
            head.weights = head.weights + damping * (target - head.weights)
    state.buffer.append((direction.trace.hidden, {k: np.asarray(v) for k, v in yb.items()}))
    state.step += 1
    return direction


def full_data_posteriors(state: TrainState, hidden: np.ndarray, labels: dict[str, np.ndarray]) -> dict[str, list[GaussianPosterior]]:
    """Posteriors over all heads given features, starting from the isotropic base prior."""
    hb = augment(hidden) if hidden.size else np.zeros((0, state.trunk.hidden_dim + 1))
    out: dict[str, list[GaussianPosterior]] = {}
    for task in state.tasks:
        base = state.base_prior(task)
        if task.kind == "regression":
            y = np.asarray(labels.get(task.name, np.zeros((0, task.n_outputs)))).reshape(hb.shape[0], task.n_outputs)
            out[task.name] = [posterior_update(hb, y[:, j], base, base.tau) for j in range(task.n_outputs)]
        else:
            y = np.asarray(labels.get(task.name, np.zeros(0))).reshape(-1)
            out[task.name] = [taylor_posterior(state.heads[task.name].weights, hb, y, base, task.kind)]
    return out


def end_epoch(state: TrainState) -> TrainState:
    """Install the full-data posterior over the epoch's collected features as every task's prior."""
    if state.buffer:
        hidden = np.concatenate([b[0] for b in state.buffer])
        labels = {t.name: np.concatenate([np.asarray(b[1][t.name]) for b in state.buffer]) for t in state.tasks}
    else:
        hidden = np.zeros((0, state.trunk.hidden_dim))
        labels = {}
    state.priors = full_data_posteriors(state, hidden, labels)
    state.buffer = []
    return state


def install_priors(state: TrainState, x: np.ndarray, labels: dict[str, np.ndarray]) -> TrainState:
    """Full-data priors from a fresh pass over ``x`` (used when switching from pre-training)."""
    hidden = forward(x, state.trunk).hidden
    state.priors = full_data_posteriors(state, hidden, labels)
    state.buffer = []
    return state


def fit_regression_heads(state: TrainState, x: np.ndarray, labels: dict[str, np.ndarray]) -> TrainState:
    """Set regression heads to the full-training-set posterior mean; marks the state predictable."""
    if state.config.method.name == "bayesagg" and any(t.kind == "regression" for t in state.tasks):
        hb = augment(forward(x, state.trunk).hidden)
        for task in state.tasks:
            if task.kind != "regression":
                continue
            y = np.asarray(labels[task.name]).reshape(hb.shape[0], -1)
            base = state.base_prior(task)
            means = [posterior_update(hb, y[:, j], base, base.tau).mean for j in range(task.n_outputs)]
            state.heads[task.name].weights = np.stack(means)
    state.ready = True
    return state


def predict(state: TrainState, x: np.ndarray) -> dict[str, np.ndarray]:
    """Per-task outputs: regression values, P(y=1) for binary, class probabilities for multiclass."""
    if not state.ready:
        raise NotTrained("call fit_regression_heads (or fit) before predicting")
    h = forward(x, state.trunk).hidden
    out = {}
    for task in state.tasks:
        p = head_forward(h, state.heads[task.name])
        out[task.name] = p[:, 0] if task.kind == "binary" else p
    return out


# --------------------------------------------------------------------------- epochs and fitting

@dataclass
class EpochResult:
    losses: np.ndarray
    unit_weights: np.ndarray    # mean aggregation weight per unit


def run_epoch(state: TrainState, x: np.ndarray, labels: dict[str, np.ndarray], method: str) -> EpochResult:
    n = x.shape[0]
    units = state.units
    loss_sum = np.zeros(len(state.tasks))
    weight_sum = np.zeros(len(units))
    for idx in _batches(state, n):
        xb = x[idx]
        yb = {k: v[idx] for k, v in labels.items()}
        if method == "bayesagg":
            direction = train_step_bayesagg(state, xb, yb)
            losses = direction.losses
            _, batch_mean = weight_summary(direction.alpha)
            weight_sum += batch_mean * len(idx)
        else:
            losses = weighted_step(state, xb, yb, method)
            weight_sum += len(idx) / len(units)
        loss_sum += losses * len(idx)
    if method == "bayesagg":
        end_epoch(state)
    losses = loss_sum / n
    if state.baseline is not None and state.phase == "main":
        state.baseline.record_epoch(losses)
    state.epoch += 1
    return EpochResult(losses, weight_sum / n)


def evaluate(state: TrainState, ds: Dataset, split: str) -> dict[str, dict[str, float]]:
    """Per-task criterion (de-normalized MAE or accuracy), mean loss, and calibration where defined."""
    x, labels = ds.subset(split)
    preds = predict(state, x)
    h = forward(x, state.trunk).hidden
    out = {}
    for task in state.tasks:
        lab = labels[task.name]
        rec = {"loss": float(task_loss(state.heads[task.name], h, lab).mean())}
        if task.kind == "regression":
            pred = denormalize(ds, task.name, preds[task.name])
            truth = denormalize(ds, task.name, lab)
            rec["criterion"] = M.task_criteria(pred, truth, "regression")
        else:
            rec["criterion"] = M.task_criteria(preds[task.name], lab, task.kind)
            rec["ece"], rec["brier"] = M.calibration(preds[task.name], lab, task.kind)
        out[task.name] = rec
    return out


def selection_score(state: TrainState, val: dict[str, dict[str, float]],
                    reference: dict[str, float] | None) -> float:
    """Validation delta-m against the single-task reference, else the summed validation loss."""
    if reference:
        rec = M.MetricRecord([val[t.name]["criterion"] for t in state.tasks],
                             [reference[t.name] for t in state.tasks],
                             M.higher_is_better([t.kind for t in state.tasks]))
        return M.delta_m(rec)
    return float(sum(v["loss"] for v in val.values()))


@dataclass
class FitResult:
    state: TrainState
    history: list[dict]
    weights: list[dict]
    best_epoch: int
    val: dict[str, dict[str, float]]
    test: dict[str, dict[str, float]]


def _snapshot(state: TrainState):
    return state.trunk.copy(), {k: h.copy() for k, h in state.heads.items()}


def fit(ds: Dataset, model: ModelConfig, config: TrainConfig,
        reference_val: dict[str, float] | None = None) -> FitResult:
    """Train one method end to end and evaluate the selected epoch on validation and test.

    BayesAgg spends ``pretrain_epochs`` of the ``epochs`` budget on LS
    pre-training; baselines use the whole budget with their own rule.
    """
    method = config.method.name
    state = init_state(ds.tasks, ds.x.shape[1], model, config)
    x, labels = ds.subset("train")
    n_pre = config.pretrain_epochs if method == "bayesagg" else 0
    history: list[dict] = []
    weight_rows: list[dict] = []
    best = (np.inf, -1, None)
    plateau_best, plateau_wait = np.inf, 0
    milestones = {int(round(0.6 * config.epochs)), int(round(0.8 * config.epochs))}
    for epoch in range(config.epochs):
        state.phase = "pretrain" if epoch < n_pre else "main"
        if epoch == n_pre and method == "bayesagg":
            install_priors(state, x, labels)
        res = run_epoch(state, x, labels, "ls" if state.phase == "pretrain" else method)
        if state.phase == "main":
            fit_regression_heads(state, x, labels)
        else:
            state.ready = True
        val = evaluate(state, ds, "val")
        score = selection_score(state, val, reference_val)
        row = {"epoch": epoch, "phase": state.phase, "lr": state.lr, "val_score": score}
        for t, loss in zip(state.tasks, res.losses):
            row[f"train_loss/{t.name}"] = float(loss)
            row[f"val_criterion/{t.name}"] = val[t.name]["criterion"]
        history.append(row)
        for u, w in zip(state.units, res.unit_weights):
            weight_rows.append({"epoch": epoch, "phase": state.phase, "task": u.label, "mean_weight": float(w)})
        if state.phase == "main":
            if score < best[0]:
                best = (score, epoch, _snapshot(state))
            if config.scheduler == "step" and epoch + 1 in milestones:
                state.lr *= 0.1
            elif config.scheduler == "plateau":
                if score < plateau_best - 1e-12:
                    plateau_best, plateau_wait = score, 0
                else:
                    plateau_wait += 1
                    if plateau_wait > config.plateau_patience:
                        state.lr *= config.plateau_factor
                        plateau_wait = 0
        log.debug("epoch %d %s score=%.5g", epoch, state.phase, score)
    if best[2] is not None:
        state.trunk, state.heads = best[2]
    state.ready = True
    return FitResult(state, history, weight_rows, best[1], evaluate(state, ds, "val"), evaluate(state, ds, "test"))
