import numpy as np
import pytest

import rbsr
from rbsr.losses import l1_loss
from rbsr.models import DiscriminatorConfig, GeneratorConfig, SRConfig
from rbsr.nn import checkpoint_read, checkpoint_write, finite_diff_check

TOY_GENERATOR = GeneratorConfig(n_res_blocks=1, channels=4)
TOY_SR = SRConfig(n_res_blocks=1, channels=4)
TOY_DISCRIMINATOR = DiscriminatorConfig(base_channels=4, n_stages=2, dense_width=8, input_size=8)


def _batch(shape, seed=0):
    return np.random.default_rng(seed).random(shape).astype(np.float32)


def test_lookalike_preserves_size():
    model = rbsr.build_lookalike_generator(TOY_GENERATOR)
    out, _ = model.forward(_batch((2, 3, 16, 12)))
    assert out.shape == (2, 3, 16, 12)
    assert out.dtype == np.float32


def test_lookalike_parameter_count():
    # head 3*4*9+4, one block 2*(4*4*9+4), tail on the concatenation 8*3*9+3
    assert rbsr.build_lookalike_generator(TOY_GENERATOR).parameter_count() == 112 + 296 + 219


def test_sr_upscales_by_four():
    model = rbsr.build_sr_generator(TOY_SR)
    out, _ = model.forward(_batch((1, 3, 8, 10)))
    assert out.shape == (1, 3, 32, 40)


def test_discriminator_output():
    model = rbsr.build_discriminator(TOY_DISCRIMINATOR)
    out, _ = model.forward(_batch((5, 3, 8, 8)))
    assert out.shape == (5, 1)
    assert np.all((out > 0) & (out < 1))


def test_discriminator_channels_cap():
    model = rbsr.build_discriminator(DiscriminatorConfig(base_channels=256, n_stages=3, dense_width=4, input_size=8))
    assert model.params["disc.stage2.conv1.weight"].value.shape[0] == 512


def test_discriminator_input_divisibility():
    with pytest.raises(rbsr.models.ModelConfigException):
        rbsr.build_discriminator(DiscriminatorConfig(n_stages=4, input_size=40))


def test_zero_tail_gives_zero_output():
    model = rbsr.build_lookalike_generator(TOY_GENERATOR)
    model.params["gen.tail.weight"].value[...] = 0
    out, _ = model.forward(_batch((1, 3, 8, 8)))
    assert np.all(out == 0)


def test_initialization_is_seeded():
    first = rbsr.build_sr_generator(TOY_SR, seed=3)
    assert first.checksum() == rbsr.build_sr_generator(TOY_SR, seed=3).checksum()
    assert first.checksum() != rbsr.build_sr_generator(TOY_SR, seed=4).checksum()
    assert all(p.value.any() for name, p in first.params.items() if name.endswith("weight"))
    assert not any(p.value.any() for name, p in first.params.items() if name.endswith("bias"))


def test_e2e_baseline_role():
    model = rbsr.build_e2e_baseline(SRConfig(n_res_blocks=2, channels=4))
    assert all(name.startswith("e2e.") for name in model.params)
    assert len(model.block_ends) == 2


def test_checkpoint_restores_model(tmp_path):
    source = rbsr.build_lookalike_generator(TOY_GENERATOR, seed=1)
    path = str(tmp_path / "gen.ckpt")
    checkpoint_write(source.parameters(), path)
    target = rbsr.build_lookalike_generator(TOY_GENERATOR, seed=2)
    target.load_state(checkpoint_read(path))
    assert target.checksum() == source.checksum()


def test_load_state_errors():
    model = rbsr.build_lookalike_generator(TOY_GENERATOR)
    state = dict(model.state_dict())
    with pytest.raises(rbsr.models.ModelConfigException):
        model.load_state({k: v for k, v in state.items() if k != "gen.tail.bias"})
    with pytest.raises(rbsr.models.ModelConfigException):
        model.load_state({**state, "gen.extra.weight": np.zeros(1)})
    with pytest.raises(rbsr.models.ModelConfigException):
        model.load_state({**state, "gen.tail.bias": np.zeros(4, np.float32)})
    other = rbsr.build_sr_generator(TOY_SR)
    with pytest.raises(rbsr.models.ModelConfigException):
        other.load_state(state)


def test_forward_names_failing_layer():
    model = rbsr.build_lookalike_generator(TOY_GENERATOR)
    with pytest.raises(rbsr.nn.ShapeMismatchException) as info:
        model.forward(_batch((1, 4, 8, 8)))
    assert "gen.head" in str(info.value)


def test_stop_after_matches_full_trace():
    model = rbsr.build_sr_generator(SRConfig(n_res_blocks=2, channels=4))
    x = _batch((1, 3, 6, 6))
    _, trace = model.forward(x)
    tapped, partial = model.forward(x, stop_after=model.block_ends[0])
    assert np.array_equal(tapped, trace.outputs[model.block_ends[0]])
    assert len(partial.outputs) == model.block_ends[0] + 1


def test_backward_rejects_wrong_gradient_shape():
    model = rbsr.build_sr_generator(TOY_SR)
    out, trace = model.forward(_batch((1, 3, 4, 4)))
    with pytest.raises(rbsr.nn.ShapeMismatchException):
        model.backward(trace, np.zeros((1, 3, 4, 4), np.float32))


def test_backward_without_parameter_gradients():
    model = rbsr.build_lookalike_generator(TOY_GENERATOR)
    out, trace = model.forward(_batch((1, 3, 6, 6)))
    dx = model.backward(trace, np.ones_like(out), param_grads=False)
    assert dx.shape == (1, 3, 6, 6)
    assert not any(p.grad.any() for p in model.parameters())


@pytest.mark.parametrize(
    "build,shape",
    [
        (lambda: rbsr.build_lookalike_generator(TOY_GENERATOR, seed=1), (2, 3, 8, 8)),
        (lambda: rbsr.build_sr_generator(TOY_SR, seed=2), (1, 3, 6, 6)),
        (lambda: rbsr.build_e2e_baseline(SRConfig(n_res_blocks=2, channels=4), seed=3), (1, 3, 6, 6)),
        (lambda: rbsr.build_discriminator(TOY_DISCRIMINATOR, seed=4), (3, 3, 8, 8)),
    ],
)
def test_gradients_match_finite_differences(build, shape):
    model = build()
    x = np.random.default_rng(5).random(shape)
    out, _ = model.forward(x.astype(np.float32))
    target = np.random.default_rng(6).random(out.shape)
    error = finite_diff_check(model, lambda pred: l1_loss(pred, target), x, samples=200)
    assert error < 1e-4


@pytest.mark.parametrize("value", [1e3, -1e3, 1e6])
def test_discriminator_output_never_saturates(value):
    model = rbsr.build_discriminator(TOY_DISCRIMINATOR, seed=1)
    out, _ = model.forward(np.full((2, 3, 8, 8), value, np.float32))
    assert np.all((out > 0) & (out < 1))
    out64, _ = model.astype(np.float64).forward(np.full((2, 3, 8, 8), value))
    assert np.all((out64 > 0) & (out64 < 1))


def test_discriminator_duplicated_rows():
    x = _batch((4, 3, 8, 8), seed=2)
    x[2] = x[0]
    out, _ = rbsr.build_discriminator(TOY_DISCRIMINATOR, seed=3).forward(x)
    assert out[2, 0] == pytest.approx(out[0, 0], abs=1e-7)


def test_forward_is_repeatable():
    model = rbsr.build_lookalike_generator(TOY_GENERATOR, seed=5)
    x = _batch((2, 3, 8, 8), seed=6)
    first, _ = model.forward(x)
    second, _ = model.forward(x)
    assert np.array_equal(first, second)


def test_zero_output_gradient_gives_zero_parameter_gradients():
    model = rbsr.build_sr_generator(TOY_SR, seed=7)
    model.zero_grad()
    out, trace = model.forward(_batch((1, 3, 6, 6)))
    dx = model.backward(trace, np.zeros_like(out))
    assert not dx.any()
    assert not any(p.grad.any() for p in model.parameters())


def test_e2e_baseline_matches_sr_generator_with_same_weights():
    sr_config = SRConfig(n_res_blocks=2, channels=4)
    sr = rbsr.build_sr_generator(sr_config, seed=8)
    e2e = rbsr.build_e2e_baseline(sr_config, seed=9)
    e2e.load_state({"e2e." + name[len("sr.") :]: value for name, value in sr.state_dict().items()})
    x = _batch((1, 3, 7, 9), seed=10)
    assert np.array_equal(sr.forward(x)[0], e2e.forward(x)[0])


def test_sr_translation_equivariance_in_interior():
    model = rbsr.build_sr_generator(TOY_SR, seed=11)
    x = _batch((1, 3, 32, 32), seed=12)
    shifted = np.roll(x, shift=(2, 3), axis=(2, 3))
    out, _ = model.forward(x)
    out_shifted, _ = model.forward(shifted)
    # away from the zero-padded borders, a 1 px LR shift moves the output by 4 HR px
    interior = out[:, :, 40:80, 40:80]
    moved = out_shifted[:, :, 48:88, 52:92]
    assert np.allclose(interior, moved, atol=1e-5)
