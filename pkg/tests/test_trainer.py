import numpy as np
import pytest

from bayesagg.data import SyntheticSpec, SyntheticTask, generate_synthetic, normalize_targets
from bayesagg.errors import NotTrained, UnknownMethod
from bayesagg.network import augment, backprop_shared, forward, hidden_gradient
from bayesagg.regression import GaussianPosterior
from bayesagg.trainer import (AdamState, MethodConfig, ModelConfig, TrainConfig, adam_step, aggregation_units,
                              bayesagg_direction, end_epoch, fit, init_state, install_priors, predict, pretrain,
                              train_step_bayesagg)

TWO_TASKS = SyntheticSpec(n=240, d_x=5, seed=3, tasks=(
    SyntheticTask("a", noise=0.1), SyntheticTask("b", noise=0.5, angle=120.0)))
MIXED = SyntheticSpec(n=240, d_x=5, seed=3, tasks=(
    SyntheticTask("r", noise=0.2), SyntheticTask("c", "multiclass", 3, angle=60.0)))
SMALL = ModelConfig(widths=(8, 6), activation="elu")


def make_state(spec=TWO_TASKS, method="bayesagg", **method_kw):
    ds, _ = normalize_targets(generate_synthetic(spec))
    cfg = TrainConfig(epochs=3, pretrain_epochs=1, batch_size=32, seed=7, method=MethodConfig(method, **method_kw))
    state = init_state(ds.tasks, ds.x.shape[1], SMALL, cfg)
    x, labels = ds.subset("train")
    return ds, state, x, labels


def ls_trunk_grads(state, xb, yb):
    trace = forward(xb, state.trunk)
    g = sum(hidden_gradient(state.heads[t.name], trace.hidden, yb[t.name]) for t in state.tasks)
    return backprop_shared(g, trace, state.trunk)


def cosine(a, b):
    a = np.concatenate([p.ravel() for p in a])
    b = np.concatenate([p.ravel() for p in b])
    return a @ b / (np.linalg.norm(a) * np.linalg.norm(b))


def test_adam_first_step_has_size_lr():
    p = [np.array([1.0, -2.0])]
    out = adam_step(p, [np.array([0.3, -5.0])], AdamState.zeros_like(p), lr=0.01)
    np.testing.assert_allclose(out[0], [0.99, -1.99], atol=1e-9)


def test_adam_constant_gradient_steady_step():
    p = [np.zeros(3)]
    state = AdamState.zeros_like(p)
    for _ in range(200):
        new = adam_step(p, [np.full(3, 2.0)], state, lr=0.1)
        step, p = p[0] - new[0], new
    np.testing.assert_allclose(step, 0.1, rtol=1e-6)


def test_adam_decoupled_weight_decay():
    p = [np.array([2.0])]
    out = adam_step(p, [np.array([0.0])], AdamState.zeros_like(p), lr=0.1, weight_decay=0.5)
    np.testing.assert_allclose(out[0], [2.0 - 0.1 * 0.5 * 2.0])


def test_units_split_regression_outputs():
    from bayesagg.data import TaskSpec
    units = aggregation_units([TaskSpec("r", "regression", 2), TaskSpec("c", "multiclass", 3)])
    assert [u.label for u in units] == ["r[0]", "r[1]", "c"]


def test_unknown_method():
    with pytest.raises(UnknownMethod):
        MethodConfig("nash")


def test_pretrain_zero_epochs_changes_nothing():
    _, state, x, labels = make_state()
    before = [p.copy() for p in state.trunk.params()]
    rng_state = state.rng.bit_generator.state
    pretrain(state, x, labels, 0)
    for a, b in zip(before, state.trunk.params()):
        np.testing.assert_array_equal(a, b)
    assert state.rng.bit_generator.state == rng_state


def test_pretrain_deterministic():
    _, s1, x, labels = make_state()
    _, s2, _, _ = make_state()
    pretrain(s1, x, labels, 2)
    pretrain(s2, x, labels, 2)
    for a, b in zip(s1.trunk.params(), s2.trunk.params()):
        np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("spec", [TWO_TASKS, MIXED])
def test_step_leaves_priors_untouched(spec):
    _, state, x, labels = make_state(spec)
    install_priors(state, x, labels)
    snapshot = {k: [(p.mean.copy(), p.cov.copy()) for p in v] for k, v in state.priors.items()}
    train_step_bayesagg(state, x[:32], {k: v[:32] for k, v in labels.items()})
    for k, posts in state.priors.items():
        for p, (m, c) in zip(posts, snapshot[k]):
            np.testing.assert_array_equal(p.mean, m)
            np.testing.assert_array_equal(p.cov, c)
    assert len(state.buffer) == 1


def test_end_epoch_with_empty_buffer_gives_base_prior():
    _, state, _, _ = make_state(MIXED)
    end_epoch(state)
    for task in state.tasks:
        base = state.base_prior(task)
        for p in state.priors[task.name]:
            np.testing.assert_allclose(p.mean, base.mean, atol=1e-12)
            np.testing.assert_allclose(p.cov, base.cov, atol=1e-12)


def test_end_epoch_matches_full_data_posterior():
    _, state, x, labels = make_state()
    install_priors(state, x, labels)
    for start in range(0, 96, 32):
        train_step_bayesagg(state, x[start:start + 32], {k: v[start:start + 32] for k, v in labels.items()})
    hidden = np.concatenate([b[0] for b in state.buffer])
    y = np.concatenate([b[1]["a"] for b in state.buffer])[:, 0]
    end_epoch(state)
    hb = augment(hidden)
    ridge = np.linalg.solve(hb.T @ hb + np.eye(hb.shape[1]), hb.T @ y)
    np.testing.assert_allclose(state.priors["a"][0].mean, ridge, atol=1e-9)
    assert state.buffer == []


def test_prior_mean_approaches_least_squares():
    _, state, x, labels = make_state(prior_variance=1e6)
    install_priors(state, x, labels)
    hb = augment(forward(x, state.trunk).hidden)
    ols, *_ = np.linalg.lstsq(hb, labels["a"][:, 0], rcond=None)
    np.testing.assert_allclose(state.priors["a"][0].mean, ols, atol=1e-4)


def test_predict_requires_training():
    _, state, x, _ = make_state()
    with pytest.raises(NotTrained):
        predict(state, x)


def test_single_task_direction_aligns_with_ls():
    spec = SyntheticSpec(n=240, d_x=5, seed=3, tasks=(SyntheticTask("a", noise=0.1),))
    _, state, x, labels = make_state(spec)
    pretrain(state, x, labels, 2)
    install_priors(state, x, labels)
    xb, yb = x[:32], {k: v[:32] for k, v in labels.items()}
    d = bayesagg_direction(state, xb, yb)
    # with one task the rule returns that task's expected gradient under the batch posterior
    for task in state.tasks:
        state.heads[task.name].weights = d.posteriors[task.name][0].mean[None, :]
    assert cosine(d.trunk_grads, ls_trunk_grads(state, xb, yb)) > 0.99


@pytest.mark.parametrize("spec", [TWO_TASKS, MIXED])
def test_point_mass_posteriors_reduce_to_ls(spec):
    # equal precisions need a common exponent across task kinds
    _, state, x, labels = make_state(spec, prior_variance=1e-30, s_regression=0.85, s_classification=0.85)
    xb, yb = x[:32], {k: v[:32] for k, v in labels.items()}
    priors = {t.name: [GaussianPosterior(w, 1e-30 * np.eye(w.size))
                       for w in (state.heads[t.name].weights if t.kind == "regression"
                                 else [state.heads[t.name].weights.reshape(-1)])]
              for t in state.tasks}
    d = bayesagg_direction(state, xb, yb, priors)
    np.testing.assert_allclose(d.alpha, 1.0 / d.alpha.shape[0], atol=1e-12)
    assert cosine(d.trunk_grads, ls_trunk_grads(state, xb, yb)) > 0.999


@pytest.mark.parametrize("method", ["bayesagg", "ls", "si", "rlw", "dwa", "pcgrad"])
def test_fit_runs_and_is_deterministic(method):
    ds, _ = normalize_targets(generate_synthetic(MIXED))
    cfg = TrainConfig(epochs=3, pretrain_epochs=1, batch_size=64, seed=1,
                      method=MethodConfig(method, mc_samples=64))
    a = fit(ds, SMALL, cfg)
    b = fit(ds, SMALL, cfg)
    assert len(a.history) == 3 and a.history == b.history
    assert a.test == b.test
    assert 0.0 <= a.test["c"]["criterion"] <= 1.0
    assert len(a.weights) == 3 * 2


def test_fit_selects_main_phase_epoch():
    ds, _ = normalize_targets(generate_synthetic(TWO_TASKS))
    res = fit(ds, SMALL, TrainConfig(epochs=4, pretrain_epochs=2, seed=0, method=MethodConfig("bayesagg")))
    assert res.best_epoch >= 2
    assert [r["phase"] for r in res.history] == ["pretrain", "pretrain", "main", "main"]


def test_bayesagg_weights_form_distribution():
    ds, _ = normalize_targets(generate_synthetic(TWO_TASKS))
    res = fit(ds, SMALL, TrainConfig(epochs=3, pretrain_epochs=1, seed=0, method=MethodConfig("bayesagg")))
    main = [r for r in res.weights if r["phase"] == "main"]
    for epoch in {r["epoch"] for r in main}:
        total = sum(r["mean_weight"] for r in main if r["epoch"] == epoch)
        assert total == pytest.approx(1.0, abs=1e-9)
