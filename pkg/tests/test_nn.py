import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wavesplit import nn
from wavesplit import tensor as T
from wavesplit.errors import ContractViolation, NumericError
from wavesplit.gradcheck import check_function
from wavesplit.nn import AdamState, FiLMBlockParams, ResidualBlockParams, adam_step
from wavesplit.tensor import Tape, Tensor


def block(rng, C=4, dilation=2, cond=6, film=True):
    p = FiLMBlockParams.init(rng, C, dilation, cond, film=film)
    for t in p.tensors("b").values():
        t.data[...] = rng.normal(size=t.shape)
    return p


def test_residual_identity_with_zero_conv():
    rng = np.random.default_rng(0)
    p = ResidualBlockParams.init(rng, 4, 2)
    p.conv_weight.data[...] = 0.0
    x = rng.normal(size=(8, 4)).astype(np.float32)
    np.testing.assert_array_equal(nn.residual_block(Tensor(x), p).data, x)


def test_film_identity_with_zero_conv_and_bias():
    rng = np.random.default_rng(1)
    p = FiLMBlockParams.init(rng, 4, 1, 6)
    p.conv_weight.data[...] = 0.0
    p.bias_proj.weight.data[...] = 0.0
    x = rng.normal(size=(2, 8, 4)).astype(np.float32)
    out = nn.film_residual_block(Tensor(x), rng.normal(size=(2, 6)), p)
    np.testing.assert_array_equal(out.data, x)


def test_residual_block_compositional_oracle():
    rng = np.random.default_rng(2)
    p = block(rng)
    x = rng.normal(size=(8, 4))
    out = nn.residual_block(Tensor(x), p).data
    h = T.conv1d_dilated(x, p.conv_weight, p.conv_bias, p.dilation)
    ref = T.layer_norm(T.prelu(h, p.slope), p.gain, p.shift).data
    np.testing.assert_allclose(out - x, ref, rtol=1e-5, atol=1e-5)


def test_film_block_compositional_oracle():
    rng = np.random.default_rng(3)
    p = block(rng)
    x, c = rng.normal(size=(8, 4)), rng.normal(size=6)
    out = nn.film_residual_block(Tensor(x), c, p).data
    a = c @ p.scale.weight.data + p.scale.bias.data
    b = c @ p.bias_proj.weight.data + p.bias_proj.bias.data
    h = T.conv1d_dilated(x, p.conv_weight, p.conv_bias, p.dilation).data * a + b
    ref = x + T.layer_norm(T.prelu(h, p.slope), p.gain, p.shift).data
    np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-5)


def test_film_with_unit_gain_and_zero_bias_is_plain_block():
    rng = np.random.default_rng(4)
    p = block(rng)
    for lin, value in ((p.scale, 1.0), (p.bias_proj, 0.0)):
        lin.weight.data[...] = 0.0
        lin.bias.data[...] = value
    x = rng.normal(size=(8, 4))
    np.testing.assert_allclose(nn.film_residual_block(Tensor(x), rng.normal(size=6), p).data,
                               nn.residual_block(Tensor(x), p).data, rtol=1e-6, atol=1e-6)


def test_additive_mode_equals_film_with_unit_gain():
    rng = np.random.default_rng(5)
    film = block(rng)
    film.scale.weight.data[...] = 0.0
    film.scale.bias.data[...] = 1.0
    additive = FiLMBlockParams(**{k: v for k, v in vars(film).items() if k != "scale"}, scale=None)
    x, c = rng.normal(size=(2, 8, 4)), rng.normal(size=(2, 6))
    np.testing.assert_array_equal(nn.film_residual_block(Tensor(x), c, additive).data,
                                  nn.film_residual_block(Tensor(x), c, film).data)
    assert not any("film_scale" in k for k in additive.tensors("b"))


def test_film_layers_have_independent_parameters():
    rng = np.random.default_rng(6)
    a, b = FiLMBlockParams.init(rng, 4, 1, 6), FiLMBlockParams.init(rng, 4, 2, 6)
    assert a.scale.weight is not b.scale.weight
    assert not np.array_equal(a.scale.weight.data, b.scale.weight.data)
    assert not np.array_equal(a.scale.weight.data, a.bias_proj.weight.data)


def test_contract_violations():
    rng = np.random.default_rng(7)
    p = FiLMBlockParams.init(rng, 4, 1, 6)
    with pytest.raises(ContractViolation):
        nn.residual_block(Tensor(np.zeros((8, 3))), p)
    with pytest.raises(ContractViolation):
        nn.film_residual_block(Tensor(np.zeros((8, 4))), np.zeros(5), p)


def test_initialization_contract():
    rng = np.random.default_rng(8)
    p = FiLMBlockParams.init(rng, 16, 4, 8)
    assert np.all(p.slope.data == 0.25) and np.all(p.conv_bias.data == 0)
    assert np.all(np.abs(p.conv_weight.data) <= 1 / np.sqrt(3 * 16))
    assert np.all(np.abs(p.bias_proj.weight.data) <= 1 / np.sqrt(8))
    assert np.all(p.bias_proj.bias.data == 0)


def test_block_weight_gradient_matches_finite_differences():
    rng = np.random.default_rng(9)
    with T.precision(np.float64):
        p = block(rng, C=4, dilation=2)
        for t in p.tensors("b").values():
            t.data = t.data.astype(np.float64)
        x = Tensor(rng.normal(size=(10, 4)))
        err, worst, _ = check_function(lambda: nn.residual_block(x, p).sum() * 0.1,
                                       {"conv": p.conv_weight}, rng, max_coords=None)
    assert err <= 1e-3, worst


# Adam ------------------------------------------------------------------------------
def adam_oracle(p0, grad_fn, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    p, m, v = float(p0), 0.0, 0.0
    for t in range(1, steps + 1):
        g = grad_fn(p)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return p


def test_adam_zero_gradient_leaves_params():
    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    adam_step(p, {"w": np.zeros(2, dtype=np.float32)}, AdamState())
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])


def test_adam_first_step_is_lr_times_sign():
    with T.precision(np.float64):
        p = {"w": Tensor(np.array([0.0]), requires_grad=True)}
        adam_step(p, {"w": np.array([0.1])}, AdamState(lr=1e-3))
    assert p["w"].data[0] == pytest.approx(-1e-3, rel=1e-6)


def test_adam_trajectory_matches_oracle():
    with T.precision(np.float64):
        w = Tensor(np.array([1.0]), requires_grad=True)
        state = AdamState(lr=0.05)
        for _ in range(10):
            with Tape() as tape:
                loss = (w * w).sum()
            w.grad = None
            tape.backward(loss)
            adam_step({"w": w}, {"w": w.grad}, state)
    assert w.data[0] == pytest.approx(adam_oracle(1.0, lambda p: 2 * p, 10, 0.05), abs=1e-6)
    assert state.step == 10


def test_adam_rejects_nan_without_touching_params():
    p = {"a": Tensor(np.ones(2), requires_grad=True), "b": Tensor(np.ones(2), requires_grad=True)}
    state = AdamState()
    with pytest.raises(NumericError):
        adam_step(p, {"a": np.ones(2, np.float32), "b": np.array([np.nan, 0.0], np.float32)}, state)
    assert state.step == 0 and np.all(p["a"].data == 1)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**16), steps=st.integers(1, 5))
def test_adam_lr_zero_is_noop(seed, steps):
    rng = np.random.default_rng(seed)
    w0 = rng.normal(size=(3, 2)).astype(np.float32)
    p = {"w": Tensor(w0.copy(), requires_grad=True)}
    state = AdamState(lr=0.0)
    for _ in range(steps):
        adam_step(p, {"w": rng.normal(size=(3, 2)).astype(np.float32)}, state)
    np.testing.assert_array_equal(p["w"].data, w0)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_adam_decreases_convex_quadratic(seed):
    with T.precision(np.float64):
        w = Tensor(np.random.default_rng(seed).normal(size=5), requires_grad=True)
        before = float(np.sum(w.data ** 2))
        adam_step({"w": w}, {"w": 2 * w.data}, AdamState(lr=1e-4))
        assert float(np.sum(w.data ** 2)) < before


def test_clip_grad_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert nn.clip_grad_norm(grads, 1.0) == pytest.approx(5.0)
    assert np.hypot(grads["a"][0], grads["b"][0]) == pytest.approx(1.0)
