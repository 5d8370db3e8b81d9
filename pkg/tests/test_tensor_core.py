import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from assoclearn import autodiff as ad
from assoclearn.optim import OptimState, adam_update
from assoclearn.params import CheckpointError, ParamSet, container_size, decode_container

from fd import check

CASES = 50


def _away_from_zero(rng, shape, gap=1e-2):
    v = rng.normal(size=shape)
    return np.where(np.abs(v) < gap, gap * np.sign(v + 1e-12) + v, v)


def _loss_weights(rng, shape):
    # random projection so the loss is not symmetric in the outputs
    return rng.normal(size=shape)


def reference_conv(x, w, b):
    c, h, wd = x.shape
    o, _, k, _ = w.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    out = np.zeros((o, h, wd))
    for oo in range(o):
        for i in range(h):
            for j in range(wd):
                out[oo, i, j] = np.sum(xp[:, i:i + k, j:j + k] * w[oo]) + b[oo]
    return out


# --- gradient suite -----------------------------------------------------------

UNARY = {
    "neg": (ad.neg, lambda r, s: r.normal(size=s)),
    "square": (ad.square, lambda r, s: r.normal(size=s)),
    "log": (ad.log, lambda r, s: r.uniform(0.5, 2.0, size=s)),
    "exp": (ad.exp, lambda r, s: r.normal(size=s)),
    "leaky_relu": (ad.leaky_relu, _away_from_zero),
    "sigmoid": (ad.sigmoid, lambda r, s: r.normal(size=s) * 3),
    "tanh": (ad.tanh, lambda r, s: r.normal(size=s)),
    "softplus": (ad.softplus, lambda r, s: r.normal(size=s) * 3),
    "pool_avg2": (ad.pool_avg2, lambda r, s: r.normal(size=(2, 4, 4))),
    "upsample_nearest2": (ad.upsample_nearest2, lambda r, s: r.normal(size=(2, 2, 3))),
    "reshape": (lambda x: ad.reshape(x, (-1,)), lambda r, s: r.normal(size=s)),
    "sum_axis": (lambda x: ad.sum(x, axis=1), lambda r, s: r.normal(size=s)),
    "mean_axis": (lambda x: ad.mean(x, axis=(0, 2)), lambda r, s: r.normal(size=s)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients_match_finite_differences(name):
    op, draw = UNARY[name]
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(CASES):
        x = draw(rng, (2, 3, 2))
        proj = _loss_weights(rng, op(x).shape)
        worst = max(worst, check(lambda x: ad.sum(ad.mul(op(x), proj)), {"x": x}))
    assert worst < 1e-6


BINARY = {
    "add": ad.add,
    "sub": ad.sub,
    "mul": ad.mul,
    "concat": lambda a, b: ad.concat([a, b], axis=1),
    "stack": lambda a, b: ad.stack([a, b]),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_gradients_match_finite_differences(name):
    op = BINARY[name]
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(CASES):
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        proj = _loss_weights(rng, op(a, b).shape)
        worst = max(worst, check(lambda a, b: ad.sum(ad.mul(op(a, b), proj)), {"a": a, "b": b}))
    assert worst < 1e-6


def test_broadcast_add_gradient_sums_over_broadcast_axes():
    rng = np.random.default_rng(3)
    for _ in range(CASES):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4,))
        proj = rng.normal(size=(3, 4))
        assert check(lambda a, b: ad.sum(ad.mul(ad.add(a, b), proj)), {"a": a, "b": b}) < 1e-6


def test_dense_gradients():
    rng = np.random.default_rng(5)
    for _ in range(CASES):
        x, w, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)
        proj = rng.normal(size=(3, 2))
        assert check(lambda x, w, b: ad.sum(ad.mul(ad.dense(x, w, b), proj)), {"x": x, "w": w, "b": b}) < 1e-6


@pytest.mark.parametrize("channels,k", [(1, 3), (2, 1), (5, 3), (4, 5)])
def test_conv_gradients(channels, k):
    rng = np.random.default_rng(channels * 10 + k)
    for _ in range(CASES if channels < 5 else 10):
        x = rng.normal(size=(2, channels, 5, 4))
        w, b = rng.normal(size=(3, channels, k, k)), rng.normal(size=3)
        proj = rng.normal(size=(2, 3, 5, 4))
        assert check(lambda x, w, b: ad.sum(ad.mul(ad.conv2d_same(x, w, b), proj)),
                     {"x": x, "w": w, "b": b}) < 1e-6


# --- convolution and pooling examples ----------------------------------------


def test_conv_all_ones_example():
    out = ad.conv2d_same(np.ones((1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1)).data[0]
    assert out[1, 1] == 9.0
    assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4.0
    assert out[0, 1] == out[1, 0] == out[1, 2] == out[2, 1] == 6.0


@pytest.mark.parametrize("c,k", [(1, 1), (1, 3), (3, 5), (6, 3), (8, 1)])
def test_conv_matches_nested_loop_reference(c, k):
    rng = np.random.default_rng(c + k)
    x, w, b = rng.normal(size=(c, 6, 5)), rng.normal(size=(4, c, k, k)), rng.normal(size=4)
    np.testing.assert_allclose(ad.conv2d_same(x, w, b).data, reference_conv(x, w, b), atol=1e-12)


def test_identity_kernel_returns_input():
    x = np.random.default_rng(0).normal(size=(1, 5, 7))
    np.testing.assert_array_equal(ad.conv2d_same(x, np.ones((1, 1, 1, 1)), np.zeros(1)).data, x)


def test_conv_bias_gradient_is_pixel_count():
    tape = ad.Tape()
    b = tape.watch("b", np.zeros(2))
    loss = ad.sum(ad.conv2d_same(np.ones((1, 4, 6)), np.ones((2, 1, 3, 3)), b))
    np.testing.assert_array_equal(ad.backward(tape, loss)["b"].data, [24.0, 24.0])


def test_conv_rejects_mismatched_channels_by_name():
    with pytest.raises(ValueError, match="channels"):
        ad.conv2d_same(np.ones((2, 4, 4)), np.ones((1, 3, 3, 3)), np.zeros(1))
    with pytest.raises(ValueError, match="odd"):
        ad.conv2d_same(np.ones((1, 4, 4)), np.ones((1, 1, 2, 2)), np.zeros(1))


def test_pool_and_upsample_examples():
    assert ad.pool_avg2(np.array([[[1.0, 3.0], [5.0, 7.0]]])).data[0, 0, 0] == 4.0
    np.testing.assert_array_equal(ad.upsample_nearest2(np.array([[[2.5]]])).data, np.full((1, 2, 2), 2.5))
    const = np.full((2, 4, 4), 0.3)
    np.testing.assert_array_equal(ad.pool_avg2(const).data, np.full((2, 2, 2), 0.3))
    with pytest.raises(ValueError, match="even"):
        ad.pool_avg2(np.ones((1, 3, 4)))


@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_pool_inverts_upsample_on_block_constant_images(c, h, w, seed):
    small = np.random.default_rng(seed).normal(size=(c, h, w))
    block = ad.upsample_nearest2(small).data
    np.testing.assert_array_equal(ad.upsample_nearest2(ad.pool_avg2(block)).data, block)


def test_activation_examples():
    assert ad.leaky_relu(np.array(-1.0)).item() == pytest.approx(-0.2, abs=1e-15)
    assert ad.sigmoid(np.array(0.0)).item() == 0.5
    assert ad.tanh(np.array(0.0)).item() == 0.0
    s = ad.sigmoid(np.array([-30.0, 30.0])).data
    assert np.all((s > 0) & (s < 1))


# --- tape semantics -----------------------------------------------------------


def test_square_and_fan_out():
    tape = ad.Tape()
    t = tape.watch("t", np.array(3.0))
    assert ad.backward(tape, ad.square(t))["t"].item() == 6.0
    tape = ad.Tape()
    t = tape.watch("t", np.array(1.5))
    assert ad.backward(tape, t + t)["t"].item() == 2.0


def test_unreached_leaf_gets_zero_gradient():
    tape = ad.Tape()
    a = tape.watch("a", np.ones(3))
    tape.watch("unused", np.ones((2, 2)))
    grads = ad.backward(tape, ad.sum(a))
    np.testing.assert_array_equal(grads["unused"].data, np.zeros((2, 2)))


def test_backward_rejects_non_scalar_and_foreign_loss():
    tape = ad.Tape()
    a = tape.watch("a", np.ones(3))
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(tape, ad.square(a))
    with pytest.raises(ValueError):
        ad.backward(ad.Tape(), ad.sum(a))


def test_backward_twice_is_identical():
    rng = np.random.default_rng(1)
    tape = ad.Tape()
    x = tape.watch("x", rng.normal(size=(1, 2, 4, 4)))
    loss = ad.sum(ad.tanh(ad.conv2d_same(x, rng.normal(size=(3, 2, 3, 3)), np.zeros(3))))
    g1, g2 = ad.backward(tape, loss)["x"].data, ad.backward(tape, loss)["x"].data
    np.testing.assert_array_equal(g1, g2)


def test_non_finite_result_raises():
    with pytest.raises(FloatingPointError):
        ad.log(np.array([0.0, 1.0]))
    with pytest.raises(FloatingPointError):
        ad.exp(np.array(1e4))


# --- parameters and optimizer ----------------------------------------------


def _params(rng):
    return ParamSet([("w", rng.normal(size=(2, 3))), ("b", rng.normal(size=3)), ("s", np.array(0.5))])


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_flatten_unflatten_and_checkpoint_round_trip(seed):
    p = _params(np.random.default_rng(seed))
    again = p.unflatten(p.flatten())
    assert again == p and list(again) == list(p)
    blob = p.to_bytes()
    assert len(blob) == container_size(p.shapes())
    assert ParamSet.from_bytes(blob) == p


def test_checkpoint_layout_and_errors():
    p = ParamSet([("ab", np.array([1.0, 2.0]))])
    blob = p.to_bytes()
    assert blob[:4] == b"ACLS"
    assert blob[4:6] == (1).to_bytes(2, "little") and blob[6:10] == (1).to_bytes(4, "little")
    assert blob[10:12] == (2).to_bytes(2, "little") and blob[12:14] == b"ab" and blob[14] == 1
    assert np.frombuffer(blob[19:], "<f8").tolist() == [1.0, 2.0]
    with pytest.raises(CheckpointError, match="offset"):
        decode_container(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError, match="offset"):
        decode_container(blob[:-3])
    with pytest.raises(ValueError):
        ParamSet([("a", np.ones(1)), ("a", np.ones(1))])


def test_adam_first_step_is_lr():
    p = ParamSet([("t", np.array(1.0))])
    new, state = adam_update(p, {"t": np.array(1.0)}, OptimState.for_params(p, lr=0.1))
    assert new["t"] - 1.0 == pytest.approx(-0.1, rel=1e-6)
    assert state.step == 1


def test_adam_zero_gradient_and_purity():
    rng = np.random.default_rng(0)
    p = _params(rng)
    st0 = OptimState.for_params(p)
    zeros = {k: np.zeros_like(v) for k, v in p.items()}
    new, state = adam_update(p, zeros, st0)
    assert new == p and state.step == 1
    grads = {k: rng.normal(size=v.shape) for k, v in p.items()}
    a, sa = adam_update(p, grads, st0)
    b, sb = adam_update(p, grads, st0)
    assert a == b and sa.step == sb.step == 1
    assert st0.step == 0 and np.all(st0.m["w"] == 0)


def test_adam_rejects_missing_or_misshaped_gradient():
    p = _params(np.random.default_rng(0))
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    del grads["b"]
    with pytest.raises(KeyError, match="b"):
        adam_update(p, grads, OptimState.for_params(p))
    grads["b"] = np.zeros(4)
    with pytest.raises(ValueError, match="shape"):
        adam_update(p, grads, OptimState.for_params(p))
