import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import numeric_grad, rel_error
from gnnroute.nn import (
    Adam,
    ConfigurationError,
    DenseLayer,
    GatedRecurrentCell,
    NonFiniteGradientError,
    ParamTensor,
    assign_params,
    dense_forward,
    gru_step,
    load_checkpoint,
    save_checkpoint,
    softmax,
    softmax_sample,
)


def test_dense_identity_case():
    layer = DenseLayer("d", 2, 2, "identity")
    layer.weight.value[:] = np.eye(2)
    np.testing.assert_array_equal(dense_forward(layer, np.array([1.0, 2.0])), [1.0, 2.0])


def test_dense_relu_case():
    layer = DenseLayer("d", 2, 2, "relu")
    layer.weight.value[:] = np.eye(2)
    np.testing.assert_array_equal(dense_forward(layer, np.array([-3.0, 4.0])), [0.0, 4.0])


def test_dense_matches_double_loop():
    rng = np.random.default_rng(3)
    layer = DenseLayer("d", 3, 4, "tanh", rng)
    layer.bias.value[:] = rng.normal(size=4)
    x = np.ones(3)
    expected = []
    for i in range(4):
        acc = layer.bias.value[i]
        for j in range(3):
            acc += layer.weight.value[i, j] * x[j]
        expected.append(math.tanh(acc))
    np.testing.assert_allclose(dense_forward(layer, x), expected, rtol=1e-14)


def test_dense_dimension_mismatch():
    with pytest.raises(ConfigurationError):
        DenseLayer("d", 3, 2).forward(np.ones(4))


@pytest.mark.parametrize("activation", ["identity", "relu", "tanh"])
def test_dense_gradient(activation):
    rng = np.random.default_rng(11)
    layer = DenseLayer("d", 5, 4, activation, rng)
    layer.bias.value[:] = rng.normal(size=4)
    x = rng.normal(size=(6, 5))
    w = rng.normal(size=(6, 4))

    def f():
        return float((layer.forward(x)[0] * w).sum())

    out, cache = layer.forward(x)
    dx = layer.backward(w, cache)
    assert rel_error(dx, numeric_grad(f, x)) < 1e-5
    assert rel_error(layer.weight.grad, numeric_grad(f, layer.weight.value)) < 1e-5
    assert rel_error(layer.bias.grad, numeric_grad(f, layer.bias.value)) < 1e-5


def test_gru_zero_weights_halves_state():
    cell = GatedRecurrentCell("g", 20, 20)
    for p in cell.params:
        p.value[:] = 0.0
    h = np.linspace(-0.9, 0.9, 20)
    np.testing.assert_allclose(gru_step(cell, h, np.ones(20)), 0.5 * h, rtol=0, atol=0)


def test_gru_zero_fixpoint():
    cell = GatedRecurrentCell("g", 20, 20, np.random.default_rng(0))
    cell.w_cand.value[:] = 0.0
    np.testing.assert_array_equal(gru_step(cell, np.zeros(20), np.ones(20) * 3), np.zeros(20))


def test_gru_gradient():
    rng = np.random.default_rng(5)
    cell = GatedRecurrentCell("g", 20, 20, rng)
    for p in cell.params[3:]:
        p.value[:] = rng.normal(size=p.shape) * 0.3
    h = rng.uniform(-1, 1, size=(3, 20))
    x = rng.normal(size=(3, 20))

    def f():
        return float(cell.forward(h, x)[0].sum())

    _, cache = cell.forward(h, x)
    dh, dx = cell.backward(np.ones((3, 20)), cache)
    # small reset-gate entries need a wider step to keep FD rounding noise down
    assert rel_error(dh, numeric_grad(f, h, 1e-5)) < 1e-5
    assert rel_error(dx, numeric_grad(f, x, 1e-5)) < 1e-5
    for p in cell.params:
        assert rel_error(p.grad, numeric_grad(f, p.value, 1e-5)) < 1e-5, p.name


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_gru_output_bounded(seed):
    rng = np.random.default_rng(seed)
    cell = GatedRecurrentCell("g", 20, 20, rng)
    out = gru_step(cell, rng.uniform(-0.999, 0.999, 20), rng.normal(size=20) * 10)
    assert out.shape == (20,)
    assert np.all(np.abs(out) < 1)


def test_softmax_uniform():
    np.testing.assert_allclose(softmax(np.zeros(3)), [1 / 3] * 3, rtol=1e-15)


def test_softmax_dominant_logit_is_stable():
    p = softmax(np.array([1000.0, 0.0]))
    assert p[0] >= 1 - 1e-12 and np.all(np.isfinite(p))
    idx, logp = softmax_sample([1000.0, 0.0], np.random.default_rng(0))
    assert idx == 0 and abs(logp) < 1e-12


def test_softmax_hand_computed():
    np.testing.assert_allclose(softmax(np.array([math.log(1), math.log(3)])), [0.25, 0.75], rtol=1e-14)


def test_softmax_sample_empty():
    with pytest.raises(ValueError):
        softmax_sample([], np.random.default_rng(0))


def test_softmax_sample_frequencies():
    rng = np.random.default_rng(1)
    logits = np.log([0.2, 0.5, 0.3])
    counts = np.bincount([softmax_sample(logits, rng)[0] for _ in range(20000)], minlength=3)
    np.testing.assert_allclose(counts / 20000, [0.2, 0.5, 0.3], atol=0.015)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=30))
def test_softmax_is_distribution(logits):
    p = softmax(np.array(logits))
    assert np.all(p >= 0)
    assert abs(p.sum() - 1) <= 1e-12


def test_adam_zero_gradient_keeps_parameter():
    p = ParamTensor("x", np.array([1.5]))
    Adam([p]).apply()
    assert p.value[0] == 1.5


def test_adam_first_step():
    p = ParamTensor("x", np.array([0.0]))
    opt = Adam([p], lr=2e-4)
    p.grad[:] = 1.0
    opt.apply()
    # m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
    assert p.value[0] == pytest.approx(-2e-4 / (1 + 1e-8), rel=1e-12)
    assert p.grad[0] == 0.0


def test_adam_decay_schedule():
    p = ParamTensor("x", np.array([0.0]))
    opt = Adam([p], lr=2e-4, decay_rate=0.96, decay_every=1)
    rates = []
    for _ in range(2):
        rates.append(opt.lr)
        p.grad[:] = 1.0
        opt.apply()
    assert rates == [2e-4, 2e-4 * 0.96]
    assert opt.lr == pytest.approx(2e-4 * 0.96**2, rel=1e-15)


def test_adam_rejects_nonfinite_gradient():
    a = ParamTensor("a", np.zeros(2))
    b = ParamTensor("b", np.zeros(2))
    opt = Adam([a, b])
    b.grad[1] = np.nan
    with pytest.raises(NonFiniteGradientError, match="'b'"):
        opt.apply()
    assert np.all(a.value == 0) and opt.step_count == 0


def test_forward_is_pure():
    rng = np.random.default_rng(2)
    cell = GatedRecurrentCell("g", 20, 20, rng)
    h, x = rng.normal(size=20), rng.normal(size=20)
    a = gru_step(cell, h, x)
    b = gru_step(cell, h, x)
    assert a.tobytes() == b.tobytes()


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    layer = DenseLayer("d", 4, 3, "relu", rng)
    layer.bias.value[:] = rng.normal(size=3) / 7
    opt = Adam(layer.params)
    layer.weight.grad[:] = rng.normal(size=(3, 4))
    opt.apply()
    path = tmp_path / "ck.json"
    save_checkpoint(path, layer.params, opt, seed=42)
    doc = load_checkpoint(path)
    assert doc["seed"] == 42
    other = DenseLayer("d", 4, 3, "relu", np.random.default_rng(1))
    assign_params(other.params, doc["params"])
    assert other.weight.value.tobytes() == layer.weight.value.tobytes()
    assert other.bias.value.tobytes() == layer.bias.value.tobytes()
    opt2 = Adam(other.params)
    opt2.load_state_dict(doc["optimizer"])
    assert opt2.step_count == 1
    assert opt2.m["d.weight"].tobytes() == opt.m["d.weight"].tobytes()
