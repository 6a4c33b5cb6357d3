import math

import numpy as np
import pytest

from feddtg import nn
from feddtg.exceptions import DimensionError, LayoutError, ParameterError

from oracles import central_difference, kl_direct, relative_error


def small_net(rng, widths=(3, 5, 4), hidden="tanh", output="identity", head="logits"):
    spec = nn.NetworkSpec.mlp(widths, hidden=hidden, output=output, head=head)
    return spec, nn.init_params(spec, rng)


def test_identity_layer_passthrough():
    spec = nn.NetworkSpec.mlp([2, 2])
    theta = nn.ParamVector(spec, np.zeros(spec.n_params))
    theta.weights(0)[:] = np.eye(2)
    np.testing.assert_array_equal(nn.forward(spec, theta, [[1.0, 2.0]]), [[1.0, 2.0]])


def test_empty_batch_passthrough():
    spec, theta = small_net(np.random.default_rng(0))
    assert nn.forward(spec, theta, np.zeros((0, 3))).shape == (0, 4)


def test_forward_is_deterministic():
    rng = np.random.default_rng(1)
    spec, theta = small_net(rng, hidden="relu")
    x = rng.normal(size=(7, 3))
    assert nn.forward(spec, theta, x).tobytes() == nn.forward(spec, theta, x).tobytes()


def test_forward_rejects_bad_input():
    spec, theta = small_net(np.random.default_rng(0))
    with pytest.raises(DimensionError):
        nn.forward(spec, theta, np.zeros((2, 4)))
    with pytest.raises(ParameterError):
        nn.forward(spec, theta, np.array([[np.nan, 0, 0]]))


def test_param_vector_layout_checks():
    spec = nn.NetworkSpec.mlp([2, 3])
    with pytest.raises(LayoutError):
        nn.ParamVector(spec, np.zeros(spec.n_params + 1))
    other = nn.ParamVector(nn.NetworkSpec.mlp([3, 2]), np.zeros(8))
    with pytest.raises(LayoutError):
        nn.ParamVector(spec, np.zeros(spec.n_params)).check_layout(other)


def test_spec_dict_round_trip():
    spec = nn.NetworkSpec.mlp([4, 8, 1], hidden="relu", output="sigmoid", head="probability")
    assert nn.NetworkSpec.from_dict(spec.to_dict()) == spec


def test_zero_upstream_gives_zero_gradients():
    rng = np.random.default_rng(2)
    spec, theta = small_net(rng)
    g = nn.backward(spec, theta, rng.normal(size=(5, 3)), np.zeros((5, 4)))
    assert not g.values.any()


def test_linear_layer_gradient_by_hand():
    spec = nn.NetworkSpec.mlp([2, 2])
    theta = nn.ParamVector(spec, np.array([1.0, 2.0, 3.0, 4.0, 0.5, -0.5]))
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    # loss = sum of outputs: dW[i, j] = sum_b x[b, i], db[j] = batch size
    g = nn.backward(spec, theta, x, np.ones((2, 2)))
    np.testing.assert_array_equal(g.weights(0), [[4.0, 4.0], [6.0, 6.0]])
    np.testing.assert_array_equal(g.bias(0), [2.0, 2.0])


@pytest.mark.parametrize("hidden", ["tanh", "sigmoid", "relu"])
def test_network_gradients_match_finite_differences(hidden):
    rng = np.random.default_rng(3)
    spec, theta = small_net(rng, widths=(3, 6, 5, 2), hidden=hidden)
    x = rng.normal(size=(4, 3))
    up = rng.normal(size=(4, 2))

    def f(v):
        return float((nn.forward(spec, theta.with_values(v), x) * up).sum())

    g = nn.backward(spec, theta, x, up)
    assert relative_error(g.values, central_difference(f, theta.values)) < 1e-4
    dx = nn.input_gradient(spec, theta, x, up)
    num = central_difference(lambda xx: float((nn.forward(spec, theta, xx) * up).sum()), x)
    assert relative_error(dx, num) < 1e-4


def test_softmax_examples():
    np.testing.assert_allclose(nn.softmax([[0.0, 0.0, 0.0]]), [[1 / 3] * 3], rtol=0, atol=1e-15)
    np.testing.assert_allclose(nn.softmax([[math.log(2), 0.0]]), [[2 / 3, 1 / 3]], rtol=0, atol=1e-15)
    rng = np.random.default_rng(4)
    for t in (0.1, 1.0, 7.0):
        p = nn.softmax(rng.normal(scale=20, size=(50, 6)), t)
        assert np.abs(p.sum(axis=1) - 1).max() < 1e-12


def test_softmax_rejects_bad_temperature():
    with pytest.raises(ParameterError):
        nn.softmax([[1.0]], 0.0)


def test_cross_entropy_values():
    loss, _ = nn.cross_entropy([[50.0, 0.0, 0.0]], np.array([0]))
    assert loss < 1e-20
    for n in (2, 5, 10):
        loss, _ = nn.cross_entropy(np.zeros((3, n)), np.array([0, 1, 1]))
        assert loss == pytest.approx(math.log(n), abs=1e-15)


def test_cross_entropy_rejects_bad_targets():
    with pytest.raises(ParameterError):
        nn.cross_entropy(np.zeros((2, 3)), np.array([0, 3]))
    with pytest.raises(DimensionError):
        nn.cross_entropy(np.zeros((2, 3)), np.array([0]))


def test_cross_entropy_gradient():
    rng = np.random.default_rng(5)
    z = rng.normal(size=(6, 4))
    y = rng.integers(0, 4, size=6)
    _, g = nn.cross_entropy(z, y)
    assert relative_error(g, central_difference(lambda v: nn.cross_entropy(v, y)[0], z)) < 1e-4


def test_kl_examples():
    rng = np.random.default_rng(6)
    z = rng.normal(size=(5, 3))
    assert nn.kl_divergence(z, nn.softmax(z))[0] == pytest.approx(0.0, abs=1e-15)
    assert nn.kl_divergence([[0.0, 0.0]], [[1.0, 0.0]])[0] == pytest.approx(math.log(2), abs=1e-15)
    q = nn.softmax(rng.normal(size=(5, 3)))
    for t in (1.0, 2.5):
        loss, g = nn.kl_divergence(z, q, t)
        assert loss == pytest.approx(kl_direct(q, z, t), abs=1e-10)
        num = central_difference(lambda v: nn.kl_divergence(v, q, t)[0], z)
        assert relative_error(g, num) < 1e-4


def test_kl_rejects_unnormalized_teacher():
    with pytest.raises(ParameterError):
        nn.kl_divergence([[0.0, 0.0]], [[0.6, 0.6]])


def test_binary_log_loss_values():
    loss, _ = nn.binary_log_loss([[0.5], [0.5]], [[True], [False]])
    assert loss == pytest.approx(2 * math.log(2), abs=1e-15)
    loss, _ = nn.binary_log_loss([[1.0], [0.0]], [[True], [False]])
    assert 0 < loss < 1e-6


def test_binary_log_loss_gradient():
    rng = np.random.default_rng(7)
    p = rng.uniform(0.05, 0.95, size=(8, 1))
    real = rng.random((8, 1)) < 0.5
    _, g = nn.binary_log_loss(p, real)
    assert relative_error(g, central_difference(lambda v: nn.binary_log_loss(v, real)[0], p, h=1e-7)) < 1e-4


def test_sgd_examples():
    spec = nn.NetworkSpec.mlp([1, 1])
    theta = nn.ParamVector(spec, np.array([1.0, 0.0]))
    opt = nn.make_optimizer("sgd", 0.1, 2)
    new, opt = nn.optimizer_step(theta, theta.with_values([2.0, 0.0]), opt)
    np.testing.assert_allclose(new.values, [0.8, 0.0], rtol=0, atol=1e-15)
    same, _ = nn.optimizer_step(new, new.with_values([0.0, 0.0]), opt)
    np.testing.assert_array_equal(same.values, new.values)


def test_adam_zero_gradient_is_fixed_point():
    spec = nn.NetworkSpec.mlp([2, 2])
    theta = nn.ParamVector(spec, np.arange(6.0))
    opt = nn.make_optimizer("adam", 1e-3, 6)
    new, opt = nn.optimizer_step(theta, theta.with_values(np.zeros(6)), opt)
    np.testing.assert_array_equal(new.values, theta.values)
    assert opt.step == 1


def test_optimizer_replay_is_bit_identical():
    rng = np.random.default_rng(8)
    spec, theta = small_net(rng)
    grads = [rng.normal(size=spec.n_params) for _ in range(100)]

    def replay(rule):
        t, opt = theta, nn.make_optimizer(rule, 1e-2, spec.n_params)
        for g in grads:
            t, opt = nn.optimizer_step(t, t.with_values(g), opt)
        return t.values.tobytes()

    for rule in ("sgd", "adam"):
        assert replay(rule) == replay(rule)


def test_optimizer_step_is_pure():
    rng = np.random.default_rng(9)
    spec, theta = small_net(rng)
    opt = nn.make_optimizer("adam", 1e-2, spec.n_params)
    before = theta.values.copy()
    nn.optimizer_step(theta, theta.with_values(rng.normal(size=spec.n_params)), opt)
    np.testing.assert_array_equal(theta.values, before)
    assert opt.step == 0 and not opt.m.any()


def test_optimizer_rejects_bad_settings():
    with pytest.raises(ParameterError):
        nn.make_optimizer("rmsprop", 1e-3, 2)
    with pytest.raises(ParameterError):
        nn.make_optimizer("sgd", 0.0, 2)
