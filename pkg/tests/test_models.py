import numpy as np
import pytest

from assoclearn import autodiff as ad
from assoclearn.models import (ArchSpec, discriminator_forward, discriminator_logit, generator_forward,
                               init_params, layer_shapes, mapper_forward)
from assoclearn.optim import OptimState, adam_update

from fd import numeric_grad, rel_err

SPEC = ArchSpec()


def conv_count(cin, cout, k=3):
    return cout * cin * k * k + cout


# hand count per layer, width 8, depth 2
HAND_COUNTS = {
    (1, "generator"): conv_count(1, 8) + conv_count(8, 16) + conv_count(16, 32)
    + conv_count(48, 16) + conv_count(24, 8) + conv_count(8, 1, 1),
    (1, "discriminator"): conv_count(1, 8) + conv_count(8, 16) + 16 * 4 * 4 + 1,
    (1, "mapper"): conv_count(1, 8) + conv_count(8, 16) + conv_count(16, 32)
    + conv_count(32, 16) + conv_count(16, 8) + conv_count(8, 1, 1),
    (3, "generator"): conv_count(3, 8) + conv_count(8, 16) + conv_count(16, 32)
    + conv_count(48, 16) + conv_count(24, 8) + conv_count(8, 3, 1),
}


@pytest.mark.parametrize("key", sorted(HAND_COUNTS))
def test_parameter_counts_match_hand_count(key):
    channels, role = key
    assert init_params(ArchSpec(channels=channels), role, 0).num_values() == HAND_COUNTS[key]


def test_documented_counts():
    assert [init_params(SPEC, r, 0).num_values() for r in ("generator", "discriminator", "mapper")] == [
        14561, 1505, 11681]


def test_init_is_deterministic_and_seeded():
    a, b, c = (init_params(SPEC, "generator", s) for s in (3, 3, 4))
    assert a == b
    assert not np.array_equal(a["enc0.w"], c["enc0.w"])
    assert all(np.all(a[n] == 0) for n in a if n.endswith(".b"))


@pytest.mark.parametrize("size", [8, 16, 32])
@pytest.mark.parametrize("channels", [1, 3])
def test_shape_contract(size, channels):
    spec = ArchSpec(channels=channels)
    x = np.random.default_rng(0).uniform(size=(2, channels, size, size))
    for fwd, role in ((generator_forward, "generator"), (mapper_forward, "mapper")):
        out = fwd(init_params(spec, role, 1), x, spec).data
        assert out.shape == x.shape
        assert np.all((out > 0) & (out < 1))
    single = generator_forward(init_params(spec, "generator", 1), x[0], spec).data
    assert single.shape == x[0].shape


def test_indivisible_input_rejected():
    with pytest.raises(ValueError, match="divisible"):
        generator_forward(init_params(SPEC, "generator", 0), np.zeros((1, 1, 10, 10)), SPEC)
    with pytest.raises(ValueError, match="expected 16x16"):
        discriminator_forward(init_params(SPEC, "discriminator", 0), np.zeros((1, 8, 8)), SPEC)


def test_discriminator_range_and_zero_head():
    p = init_params(SPEC, "discriminator", 2)
    x = np.random.default_rng(0).uniform(size=(4, 1, 16, 16))
    d = discriminator_forward(p, x, SPEC).data
    assert d.shape == (4,) and np.all((d > 0) & (d < 1))
    zeroed = p.unflatten(np.where([n.startswith("fc.") for n, s in layer_shapes(SPEC, "discriminator")
                                   for _ in range(int(np.prod(s)))], 0.0, p.flatten()))
    assert discriminator_forward(zeroed, x[0], SPEC).item() == 0.5


def test_discriminator_input_gradient():
    p = init_params(SPEC, "discriminator", 5)
    img = np.random.default_rng(1).uniform(size=(1, 16, 16))

    def loss(v):
        return ad.softplus(ad.neg(discriminator_logit(p, v, SPEC)))

    tape = ad.Tape()
    g = ad.backward(tape, loss(tape.watch("img", img)))["img"].data
    assert rel_err(g, numeric_grad(lambda v: loss(v).item(), img)) < 1e-6


def test_generator_fits_single_pair():
    rng = np.random.default_rng(0)
    x, y = rng.uniform(size=(1, 16, 16)), rng.uniform(0.2, 0.8, size=(1, 16, 16))
    params = init_params(SPEC, "generator", 0)
    state = OptimState.for_params(params, lr=1e-3)
    start = None
    for _ in range(200):
        tape = ad.Tape()
        loss = ad.sum(ad.square(ad.sub(generator_forward(tape.watch_params(params), x, SPEC), y)))
        start = loss.item() if start is None else start
        params, state = adam_update(params, ad.backward(tape, loss), state)
    final = float(np.sum((generator_forward(params, x, SPEC).data - y) ** 2))
    assert final < 0.1 * start


def test_forward_is_pure():
    p = init_params(SPEC, "mapper", 9)
    x = np.random.default_rng(2).uniform(size=(3, 1, 16, 16))
    np.testing.assert_array_equal(mapper_forward(p, x, SPEC).data, mapper_forward(p, x, SPEC).data)
