import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evadelab.errors import ConfigError, TrainingError, UsageError
from evadelab.numerics import (AdamState, DenseNet, LayerSpec, adam_step, load_checkpoint, net_backward, net_forward,
                               save_checkpoint)

from conftest import central_difference, relative_error


def _net(specs, params):
    return DenseNet([LayerSpec(*s) for s in specs], np.asarray(params, float))


def test_identity_layer_passes_input_through():
    net = _net([(2, 2, "identity")], [1, 0, 0, 1, 0, 0])
    assert np.array_equal(net_forward(net, np.array([1.0, 2.0])), [1.0, 2.0])


def test_relu_layer_clamps_negative():
    net = _net([(2, 2, "relu")], [1, 0, 0, 1, -3, 0])
    assert np.array_equal(net_forward(net, np.array([1.0, 2.0])), [0.0, 2.0])


def test_two_layer_hand_computed_value():
    # W1 rows are input units: x=(1,0) selects row (1, 2); + b1 (0.5, -3) -> relu (1.5, 0); W2=(2,-1), b2=0.25
    net = _net([(2, 2, "relu"), (2, 1, "identity")], [1, 2, 3, 4, 0.5, -3, 2, -1, 0.25])
    assert net_forward(net, np.array([1.0, 0.0]))[0] == pytest.approx(3.25)


def test_width_mismatch_is_usage_error():
    net = DenseNet.mlp([3, 4, 2])
    with pytest.raises(UsageError):
        net.forward(np.zeros(5))
    with pytest.raises(UsageError):
        DenseNet([LayerSpec(2, 3, "relu"), LayerSpec(4, 1, "identity")])


def test_zero_output_grad_gives_zero_gradients():
    net = DenseNet.mlp([3, 5, 2], rng=np.random.default_rng(1))
    _, tape = net.forward(np.ones((4, 3)))
    g = net_backward(net, tape, np.zeros((4, 2)))
    assert g.shape == (net.param_count,) and not g.any()


def test_linear_neuron_gradient_is_input():
    net = _net([(1, 1, "identity")], [0.7, 0.0])
    _, tape = net.forward(np.array([3.0]))
    g = net_backward(net, tape, np.array([1.0]))
    assert g[0] == pytest.approx(3.0) and g[1] == pytest.approx(1.0)


def test_stale_tape_rejected():
    net = DenseNet.mlp([2, 3, 1])
    _, tape = net.forward(np.zeros(2))
    net.set_params(net.params + 0.1)
    with pytest.raises(UsageError):
        net.backward(tape, np.ones(1))
    other = net.copy()
    _, tape = net.forward(np.zeros(2))
    with pytest.raises(UsageError):
        other.backward(tape, np.ones(1))


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("acts", [("relu", "identity"), ("tanh", "tanh"), ("relu", "tanh")])
def test_backward_matches_finite_differences(seed, acts):
    rng = np.random.default_rng(seed)
    net = DenseNet.mlp([4, 7, 6, 3], hidden_activation=acts[0], output_activation=acts[1], rng=rng)
    x = rng.normal(size=(5, 4))
    w = rng.normal(size=(5, 3))
    _, tape = net.forward(x)
    g, gx = net.backward(tape, w)

    def loss_p(p):
        return float(np.sum(DenseNet(net.layers, p)(x) * w))

    def loss_x(xx):
        return float(np.sum(net(xx) * w))

    assert relative_error(g, central_difference(loss_p, net.params)) < 1e-4
    assert relative_error(gx, central_difference(loss_x, x)) < 1e-4


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_forward_is_pure(seed):
    rng = np.random.default_rng(seed)
    net = DenseNet.mlp([3, 8, 2], rng=rng)
    x = rng.normal(size=(6, 3))
    a, b = net(x), net(x)
    assert np.array_equal(a, b) and np.all(np.isfinite(a))


def test_adam_zero_gradient_keeps_params_and_decays_moments():
    s = AdamState(3, lr=0.1)
    s.m[:] = 1.0
    s.v[:] = 1.0
    p = np.array([1.0, -2.0, 0.5])
    out = adam_step(s, p, np.zeros(3))
    assert np.array_equal(out, p)
    assert np.allclose(s.m, 0.9) and np.allclose(s.v, 0.999) and s.step == 1


def test_adam_first_step_magnitude_is_learning_rate():
    s = AdamState(2, lr=0.01)
    out = adam_step(s, np.zeros(2), np.array([3.0, -0.2]))
    assert np.allclose(np.abs(out), 0.01, rtol=1e-6)
    assert s.step == 1


def test_adam_descends_quadratic():
    s = AdamState(1, lr=0.1)
    x = np.array([1.0])
    for _ in range(100):
        x = adam_step(s, x, 2 * x)
    assert abs(x[0]) < 0.05
    assert s.step == 100


def test_adam_rejects_nan():
    with pytest.raises(TrainingError):
        adam_step(AdamState(1), np.zeros(1), np.array([np.nan]))


def test_checkpoint_round_trip_and_validation(tmp_path):
    net = DenseNet.mlp([3, 4, 2], rng=np.random.default_rng(3))
    opt = AdamState(net.param_count)
    path = tmp_path / "net.json"
    save_checkpoint(path, net, opt)
    back, opt2 = load_checkpoint(path)
    assert np.array_equal(back.params, net.params) and opt2.size == net.param_count
    data = json.loads(path.read_text())
    data["params"] = data["params"][:-1]
    path.write_text(json.dumps(data))
    with pytest.raises(ConfigError):
        load_checkpoint(path)
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "missing.json")
