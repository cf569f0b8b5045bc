import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridpolicy.nn_core import (MLP, Adam, AdamConfig, AttentionBlock, ConfigError, Linear,
                                  ParamStore, TrainingError, assign_params, check_store_gradients,
                                  gelu, gelu_grad, load_checkpoint, lr_at, make_rng, max_rel_error,
                                  mse, numerical_grad, save_checkpoint, softmax, softmax_ce)


def _input_grad_error(layer, x, dy):
    """Relative error of d<y, dy>/dx vs central differences."""
    y, cache = layer.forward(x)
    analytic = layer.backward(cache, dy)
    numeric = numerical_grad(lambda: float(np.sum(layer.forward(x)[0] * dy)), x)
    return max_rel_error(analytic, numeric)


def _param_grad_error(layer, store, x, dy):
    store.zero_grad()
    y, cache = layer.forward(x)
    layer.backward(cache, dy)
    return check_store_gradients(lambda: float(np.sum(layer.forward(x)[0] * dy)), store)


def test_zero_weight_mlp_outputs_bias():
    store = ParamStore()
    net = MLP(store, "m", [3, 4, 2])
    store.values["m.1.b"][:] = [0.5, -2.0]
    out = net(np.random.default_rng(0).normal(size=(5, 3)))
    np.testing.assert_allclose(out, np.tile([0.5, -2.0], (5, 1)))


def test_identity_linear():
    store = ParamStore()
    lin = Linear(store, "l", 3, 3)
    store.values["l.W"][:] = np.eye(3)
    x = np.array([[1.0, -2.0, 3.0]])
    np.testing.assert_array_equal(lin(x), x)


def test_linear_shape_mismatch():
    lin = Linear(ParamStore(), "l", 3, 2)
    with pytest.raises(ConfigError):
        lin(np.zeros((1, 4)))


@pytest.mark.parametrize("activation", ["gelu", "tanh"])
def test_mlp_gradients(activation):
    rng = make_rng(1)
    store = ParamStore()
    net = MLP(store, "m", [4, 6, 5, 3], rng, activation=activation)
    x = rng.normal(size=(3, 4))
    dy = rng.normal(size=(3, 3))
    assert _param_grad_error(net, store, x, dy) < 1e-4
    assert _input_grad_error(net, x, dy) < 1e-4


def test_mlp_final_activation_gradients():
    rng = make_rng(2)
    store = ParamStore()
    net = MLP(store, "m", [3, 5, 4], rng, final_activation=True)
    x = rng.normal(size=(2, 3))
    dy = rng.normal(size=(2, 4))
    assert _param_grad_error(net, store, x, dy) < 1e-4


def test_gelu_derivative():
    x = np.linspace(-4, 4, 41)
    numeric = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6
    np.testing.assert_allclose(gelu_grad(x), numeric, rtol=1e-6, atol=1e-8)


def test_attention_single_token_is_value_projection():
    rng = make_rng(3)
    store = ParamStore()
    blk = AttentionBlock(store, "a", 4, rng)
    x = rng.normal(size=(1, 4))
    expected = blk.o(blk.v(x))
    np.testing.assert_allclose(blk.attend(x), expected)
    np.testing.assert_allclose(blk(x), x + expected)


def test_attention_identical_tokens_give_identical_rows():
    rng = make_rng(4)
    blk = AttentionBlock(ParamStore(), "a", 6, rng, ffn_width=8)
    x = np.tile(rng.normal(size=(1, 6)), (5, 1))
    y = blk(x)
    np.testing.assert_allclose(y, np.tile(y[:1], (5, 1)), atol=1e-12)


@pytest.mark.parametrize("ffn", [0, 7])
def test_attention_gradients(ffn):
    rng = make_rng(5)
    store = ParamStore()
    blk = AttentionBlock(store, "a", 4, rng, ffn_width=ffn)
    x = rng.normal(size=(2, 3, 4))
    dy = rng.normal(size=(2, 3, 4))
    assert _param_grad_error(blk, store, x, dy) < 1e-4
    assert _input_grad_error(blk, x, dy) < 1e-4


def test_attention_permutation_equivariant():
    rng = make_rng(6)
    blk = AttentionBlock(ParamStore(), "a", 4, rng, ffn_width=5)
    x = rng.normal(size=(5, 4))
    perm = rng.permutation(5)
    np.testing.assert_allclose(blk(x)[perm], blk(x[perm]), atol=1e-12)


def test_attention_counts_calls():
    blk = AttentionBlock(ParamStore(), "a", 2, make_rng(0))
    blk(np.zeros((3, 2)))
    blk(np.zeros((1, 3, 2)))
    assert blk.calls == 2


def test_softmax_ce_examples():
    loss, grad = softmax_ce(np.array([0.0, 0.0]), np.array(0))
    assert loss == pytest.approx(math.log(2))
    loss, _ = softmax_ce(np.array([10.0, -10.0]), np.array(0))
    assert loss == pytest.approx(2.061153622438558e-09, rel=1e-6)
    with pytest.raises(ValueError):
        softmax_ce(np.array([0.0, 0.0]), np.array(2))


def test_softmax_ce_gradient_matches_fd():
    rng = make_rng(7)
    logits = rng.normal(size=(4, 3, 5))
    target = rng.integers(0, 5, (4, 3))
    _, grad = softmax_ce(logits, target)
    numeric = numerical_grad(lambda: softmax_ce(logits, target)[0], logits)
    assert max_rel_error(grad, numeric) < 1e-4


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.data())
def test_softmax_ce_gradient_sums_to_zero(values, data):
    t = data.draw(st.integers(0, len(values) - 1))
    loss, grad = softmax_ce(np.array(values), np.array(t))
    assert loss >= 0
    assert abs(grad.sum()) < 1e-9


def test_mse_examples_and_gradient():
    assert mse([1.0, 0.0], [0.0, 0.0])[0] == pytest.approx(0.5)
    loss, grad = mse([0.3, 0.2], [0.3, 0.2])
    assert loss == 0.0 and not grad.any()
    rng = make_rng(8)
    pred, target = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    numeric = numerical_grad(lambda: mse(pred, target)[0], pred)
    assert max_rel_error(mse(pred, target)[1], numeric) < 1e-6
    with pytest.raises(ConfigError):
        mse([1.0], [1.0, 2.0])


def test_softmax_stable_for_large_inputs():
    p = softmax(np.array([1e3, -1e3, 0.0]))
    assert np.isfinite(p).all() and p.sum() == pytest.approx(1.0)


def test_lr_schedule_warmup_then_cosine():
    assert lr_at(0, 1.0, 100, 1000) == pytest.approx(0.01)
    assert lr_at(99, 1.0, 100, 1000) == pytest.approx(1.0)
    assert lr_at(550, 1.0, 100, 1000) == pytest.approx(0.5)
    assert lr_at(1000, 1.0, 100, 1000) == pytest.approx(0.0, abs=1e-12)


def test_adam_zero_gradient_leaves_params():
    store = ParamStore()
    store.add("w", np.array([[1.0, -2.0]]))
    opt = Adam(store, AdamConfig(lr=0.1))
    for _ in range(5):
        store.zero_grad()
        opt.step()
    np.testing.assert_array_equal(store["w"], [[1.0, -2.0]])


def test_adam_converges_on_quadratic():
    store = ParamStore()
    store.add("x", np.array([5.0]))
    opt = Adam(store, AdamConfig(lr=0.1, warmup=10, total_steps=500))
    for _ in range(500):
        store.zero_grad()
        store.grads["x"][:] = 2 * (store["x"] - 1.5)
        opt.step()
    assert abs(store["x"][0] - 1.5) < 1e-3


def test_adam_rejects_non_finite_gradient():
    store = ParamStore()
    store.add("x", np.zeros(2))
    store.grads["x"][0] = np.nan
    with pytest.raises(TrainingError):
        Adam(store).step()


def _train_tiny(seed):
    rng = make_rng(seed)
    store = ParamStore()
    net = MLP(store, "m", [2, 8, 1], rng)
    opt = Adam(store, AdamConfig(lr=1e-2, warmup=5, total_steps=50))
    traj = []
    for _ in range(50):
        x = rng.normal(size=(16, 2))
        store.zero_grad()
        y, cache = net.forward(x)
        loss, dy = mse(y, x[:, :1] * x[:, 1:])
        net.backward(cache, dy)
        opt.step()
        traj.append(store.flat().copy())
    return np.array(traj)


def test_training_is_bit_deterministic():
    assert _train_tiny(3).tobytes() == _train_tiny(3).tobytes()
    assert _train_tiny(3).tobytes() != _train_tiny(4).tobytes()


def test_no_nan_for_large_finite_inputs():
    rng = make_rng(9)
    store = ParamStore()
    net = MLP(store, "m", [3, 8, 2], rng)
    blk = AttentionBlock(ParamStore(), "a", 3, rng, ffn_width=4)
    x = rng.uniform(-1e3, 1e3, (4, 3))
    assert np.isfinite(net(x)).all()
    assert np.isfinite(blk(x)).all()


def test_checkpoint_round_trip(tmp_path):
    rng = make_rng(10)
    store = ParamStore()
    MLP(store, "m", [3, 4, 2], rng)
    store.add("scalar", 2.5)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, store, "abc123", {"mode": "hierarchical"})
    loaded, h, meta = load_checkpoint(path)
    assert h == "abc123" and meta == {"mode": "hierarchical"}
    assert loaded.names() == store.names()
    assert loaded.flat().tobytes() == store.flat().tobytes()
    fresh = ParamStore()
    MLP(fresh, "m", [3, 4, 2])
    fresh.add("scalar", 0.0)
    assign_params(fresh, loaded)
    np.testing.assert_array_equal(fresh.flat(), store.flat())


def test_checkpoint_rejects_corruption(tmp_path):
    store = ParamStore()
    store.add("w", np.ones((2, 2)))
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, store)
    raw = path.read_bytes()
    (tmp_path / "magic.ckpt").write_bytes(b"XX" + raw[2:])
    (tmp_path / "short.ckpt").write_bytes(raw[:-8])
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(tmp_path / "magic.ckpt")
    with pytest.raises(ValueError, match="expected 4 floats"):
        load_checkpoint(tmp_path / "short.ckpt")


def test_assign_params_layout_mismatch():
    a, b = ParamStore(), ParamStore()
    a.add("w", np.zeros(2))
    b.add("v", np.zeros(2))
    with pytest.raises(ConfigError):
        assign_params(a, b)
