import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tgopt.errors import DegenerateLabels, DomainError, InvalidSpec, NumericalDivergence, ShapeMismatch
from tgopt.nn import (
    Activation,
    AdamState,
    LearningCurve,
    LossKind,
    Metric,
    NetSpec,
    Params,
    TrainConfig,
    activate,
    adam_step,
    default_batch_size,
    forward,
    grad,
    init_params,
    loss,
    metric,
    train,
)


def fd_gradient(spec, params, X, y, kind, h=1e-5):
    """Central differences over every parameter (independent oracle)."""
    flat = params.flatten()
    out = np.zeros_like(flat)
    for k in range(flat.size):
        up, dn = flat.copy(), flat.copy()
        up[k] += h
        dn[k] -= h
        lu = loss(kind, forward(spec, params.unflatten(up), X)[:, 0], y)
        ld = loss(kind, forward(spec, params.unflatten(dn), X)[:, 0], y)
        out[k] = (lu - ld) / (2 * h)
    return out


def max_rel_err(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-7)))


def random_case(seed):
    rng = np.random.default_rng(seed)
    n_hidden = int(rng.integers(0, 4))
    widths = [int(rng.integers(1, 17))] + [int(rng.integers(1, 17)) for _ in range(n_hidden)] + [1]
    hidden = [Activation.TANH, Activation.SIGMOID, Activation.LINEAR][seed % 3]
    bce = seed % 2 == 0
    out_act = Activation.SIGMOID if bce else [Activation.LINEAR, Activation.TANH][seed % 4 // 2]
    spec = NetSpec(tuple(widths), hidden, out_act, 1e-3)
    params = init_params(spec, seed)
    X = rng.normal(size=(7, widths[0]))
    y = rng.integers(0, 2, 7).astype(float) if bce else rng.normal(size=7)
    return spec, params, X, y, LossKind.BCE if bce else LossKind.MSE


@pytest.mark.parametrize("seed", range(20))
def test_gradient_matches_finite_differences(seed):
    spec, params, X, y, kind = random_case(seed)
    g = grad(spec, params, X, y, kind).flatten()
    assert max_rel_err(g, fd_gradient(spec, params, X, y, kind)) <= 1e-4


def test_relu_gradient_away_from_kinks():
    rng = np.random.default_rng(1)
    spec = NetSpec((4, 8, 6, 1), Activation.RELU, Activation.LINEAR)
    params = init_params(spec, 3)
    X, y = rng.normal(size=(5, 4)), rng.normal(size=5)
    g = grad(spec, params, X, y).flatten()
    assert max_rel_err(g, fd_gradient(spec, params, X, y, LossKind.MSE)) <= 1e-4


def test_zero_loss_batch_gives_zero_gradient():
    spec = NetSpec((2, 1), Activation.TANH, Activation.LINEAR)
    params = Params((np.array([[1.0], [-2.0]]),), (np.array([0.5]),))
    X = np.array([[1.0, 2.0], [0.0, 1.0]])
    y = forward(spec, params, X)[:, 0]
    assert np.all(grad(spec, params, X, y).flatten() == 0)


def test_duplicated_batch_same_gradient():
    spec, params, X, y, kind = random_case(3)
    g1 = grad(spec, params, X, y, kind).flatten()
    g2 = grad(spec, params, np.vstack([X, X]), np.concatenate([y, y]), kind).flatten()
    assert np.allclose(g1, g2, rtol=1e-12, atol=1e-15)


def test_grad_shape_errors():
    spec = NetSpec((3, 2, 1))
    params = init_params(spec, 0)
    with pytest.raises(ShapeMismatch):
        grad(spec, params, np.zeros((2, 4)), np.zeros(2))
    with pytest.raises(ShapeMismatch):
        grad(spec, params, np.zeros((2, 3)), np.zeros(3))


# -- init and forward ----------------------------------------------------------------


def test_init_is_glorot_and_deterministic():
    spec = NetSpec((4, 3, 1))
    a, b = init_params(spec, 11), init_params(spec, 11)
    assert all(np.array_equal(x, y) for x, y in zip(a.arrays(), b.arrays()))
    assert all(np.all(bias == 0) for bias in a.biases)
    assert np.all(np.abs(a.weights[0]) <= math.sqrt(6 / 7))
    assert math.isclose(math.sqrt(6 / 7), 0.9258, abs_tol=1e-4)


def test_forward_examples():
    ident = NetSpec((3, 3), Activation.TANH, Activation.LINEAR)
    X = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(forward(ident, Params((np.eye(3),), (np.zeros(3),)), X), X)
    sig = NetSpec((2, 1), output_activation=Activation.SIGMOID)
    out = forward(sig, Params((np.zeros((2, 1)),), (np.zeros(1),)), np.ones((4, 2)))
    assert np.all(out == 0.5)
    assert np.all(activate(Activation.RELU, np.array([-3.0, -0.1])) == 0)
    with pytest.raises(ShapeMismatch):
        forward(ident, Params((np.eye(3),), (np.zeros(3),)), np.zeros((2, 2)))


def test_sigmoid_clamp():
    p = activate(Activation.SIGMOID, np.array([-1e4, 1e4]))
    assert p[0] == 1e-7 and p[1] == 1 - 1e-7


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20), st.integers(0, 2 ** 20))
def test_bce_with_clamp_is_finite(logits, seed):
    rng = np.random.default_rng(seed)
    p = activate(Activation.SIGMOID, np.array(logits))
    y = rng.integers(0, 2, len(logits))
    assert math.isfinite(loss(LossKind.BCE, p, y))


def test_netspec_validation():
    with pytest.raises(InvalidSpec):
        NetSpec((3,))
    with pytest.raises(InvalidSpec):
        NetSpec((3, 0, 1))
    with pytest.raises(InvalidSpec):
        NetSpec((3, 1), learning_rate=0)
    assert NetSpec((4, 3, 1)).n_params() == 19


def test_params_json_round_trip():
    p = init_params(NetSpec((3, 4, 1)), 2)
    q = Params.from_json(p.to_json())
    assert np.array_equal(p.flatten(), q.flatten())
    assert p.to_json()["layer_widths"] == [3, 4, 1]


# -- losses and metrics ---------------------------------------------------------------


def test_loss_examples():
    assert loss(LossKind.MSE, [1.0, 2.0], [1.0, 2.0]) == 0
    assert loss(LossKind.MSE, [1.0, 3.0], [0.0, 0.0]) == 5
    assert math.isclose(loss(LossKind.BCE, [0.5, 0.5], [0, 1]), math.log(2), rel_tol=1e-12)
    with pytest.raises(DomainError):
        loss(LossKind.BCE, [0.0, 0.5], [0, 1])
    with pytest.raises(DomainError):
        loss(LossKind.BCE, [0.3, 0.5], [0, 2])
    with pytest.raises(ShapeMismatch):
        loss(LossKind.MSE, [1.0], [1.0, 2.0])


def test_metric_examples():
    assert metric(Metric.AUC, [0.1, 0.9, 0.4, 0.8], [0, 1, 0, 1]) == 1.0
    assert metric(Metric.ERROR_RATE, [0.0, 1.0, 1.0], [0, 1, 1]) == 0.0
    assert metric(Metric.AUC, [0.2, 0.8, 0.6], [0, 1, 0]) == 1.0
    assert metric(Metric.AUC, [0.5, 0.5], [0, 1]) == 0.5
    with pytest.raises(DegenerateLabels):
        metric(Metric.AUC, [0.2, 0.3], [1, 1])


def _auc_bruteforce(p, y):
    pos = [a for a, t in zip(p, y) if t == 1]
    neg = [a for a, t in zip(p, y) if t == 0]
    s = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg)
    return s / (len(pos) * len(neg))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_auc_matches_pair_count_and_is_monotone_invariant(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 30))
    y = rng.integers(0, 2, n)
    y[0], y[1] = 0, 1
    p = np.round(rng.random(n), 1)  # ties on purpose
    a = metric(Metric.AUC, p, y)
    assert math.isclose(a, _auc_bruteforce(p, y), abs_tol=1e-12)
    assert math.isclose(metric(Metric.AUC, np.exp(3 * p) - 7, y), a, abs_tol=1e-12)


# -- Adam -----------------------------------------------------------------------------------


def test_adam_first_step_moves_by_alpha():
    alpha = 0.01
    new, state = adam_step([np.array([0.0])], [np.array([1.0])], AdamState.zeros_like([np.zeros(1)]), alpha)
    # m_hat = 1, v_hat = 1, step = alpha / (1 + 1e-8)
    assert abs(new[0][0] - (-alpha / (1 + 1e-8))) <= 1e-12
    assert abs(new[0][0] + alpha) <= 1e-9
    assert state.t == 1


def test_adam_zero_gradient_is_noop_and_deterministic():
    p = [np.array([1.0, -2.0])]
    st_ = AdamState.zeros_like(p)
    cur = p
    for _ in range(5):
        cur, st_ = adam_step(cur, [np.zeros(2)], st_, 0.1)
    assert np.array_equal(cur[0], p[0])
    rng = np.random.default_rng(0)
    gs = [rng.normal(size=2) for _ in range(10)]

    def run():
        c, s = [np.zeros(2)], AdamState.zeros_like([np.zeros(2)])
        for g in gs:
            c, s = adam_step(c, [g], s, 0.05)
        return c[0]

    assert np.array_equal(run(), run())


# -- training -------------------------------------------------------------------------------


def _separable(seed=0, n=80):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 2))
    y = (X[:, 0] + X[:, 1] > 0).astype(float)
    return X, y


def test_train_descends_on_separable_set():
    X, y = _separable()
    spec = NetSpec((2, 4, 1), Activation.TANH, Activation.SIGMOID, 0.02)
    init = init_params(spec, 0)
    before = loss(LossKind.BCE, forward(spec, init, X)[:, 0], y)
    params, curve, final = train(spec, TrainConfig(epochs=30, seed=0, loss_kind=LossKind.BCE), (X, y), (X, y))
    assert final < before
    assert curve.fractions[-1] == 1.0
    assert list(curve.fractions) == sorted(curve.fractions)


def test_train_is_deterministic():
    X, y = _separable(1)
    spec = NetSpec((2, 5, 1), Activation.TANH, Activation.LINEAR, 0.01)
    cfg = TrainConfig(epochs=5, seed=3)
    a = train(spec, cfg, (X, y), (X, y))
    b = train(spec, cfg, (X, y), (X, y))
    assert a[1] == b[1] and a[2] == b[2]
    assert np.array_equal(a[0].flatten(), b[0].flatten())


def test_train_config_validation_and_checkpoints():
    with pytest.raises(InvalidSpec):
        TrainConfig(epochs=0)
    with pytest.raises(InvalidSpec):
        TrainConfig(batch_size=0)
    assert TrainConfig(curve_checkpoints=(0.5,)).curve_checkpoints == (0.5, 1.0)


def test_divergence_is_reported():
    X, y = _separable(2)
    y = y * 1e200
    spec = NetSpec((2, 3, 1), Activation.RELU, Activation.LINEAR, 1e3)
    with pytest.raises(NumericalDivergence):
        train(spec, TrainConfig(epochs=50, seed=0), (X, y), (X, y))


def test_default_batch_size_rule():
    assert default_batch_size(10) == 8
    assert default_batch_size(320) == 20
    assert default_batch_size(10_000) == 128


def test_learning_curve_json():
    c = LearningCurve(((0.5, 2.0), (1.0, 1.0)))
    assert LearningCurve.from_json(c.to_json()) == c
    assert c.at(0.5) == 2.0
