import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from progsr import numerics as nx
from progsr.checkpoint import GrowthState, load_checkpoint
from progsr.convkit import conv2d
from progsr.layers import Adam, EqualizedConv2d, EqualizedLinear, equalized_scale, pixel_norm
from progsr.numerics import Tensor, grad_check
from progsr.progan import (
    NonFiniteLossError,
    TrainConfig,
    build_discriminator,
    build_generator,
    fade_alpha,
    fade_blend,
    generate,
    initial_state,
    minibatch_stddev,
    restore_progan,
    sample_latents,
    schedule_step,
    train_progan,
    wgan_gp_loss,
)

TINY = dict(latent_dim=8, base_channels=8, min_channels=4, batch_size=4)


def tiny(**kw):
    return TrainConfig(**{**TINY, **kw})


# -- minibatch stddev ----------------------------------------------------


def test_stddev_of_identical_samples_is_zero():
    x = np.tile(np.random.default_rng(0).standard_normal((1, 3, 4, 4)), (5, 1, 1, 1))
    out = minibatch_stddev(Tensor(x)).data
    np.testing.assert_allclose(out[:, 3], 0.0, atol=1e-12)


def test_stddev_two_samples_zero_and_two():
    x = np.stack([np.zeros((2, 3, 3)), np.full((2, 3, 3), 2.0)])
    out = minibatch_stddev(Tensor(x)).data
    np.testing.assert_array_equal(out[:, 2], 1.0)
    np.testing.assert_array_equal(out[:, :2], x)


def test_stddev_shape():
    assert minibatch_stddev(Tensor(np.zeros((4, 8, 16, 16)))).shape == (4, 9, 16, 16)


@given(arrays(np.float64, (3, 2, 2, 2), elements=st.floats(-5, 5, allow_nan=False)))
def test_stddev_channel_is_constant_population_std(x):
    out = minibatch_stddev(Tensor(x)).data[:, -1]
    expect = x.std(axis=0).mean()
    np.testing.assert_allclose(out, expect, atol=1e-12)


def test_stddev_gradient():
    x = np.random.default_rng(2).standard_normal((3, 2, 3, 3))
    c = Tensor(np.random.default_rng(3).standard_normal((3, 3, 3, 3)))
    assert grad_check(lambda t: (minibatch_stddev(t) * c).sum(), x).max_rel_error < 1e-6


# -- equalized layers ----------------------------------------------------


def test_equalized_scale_values():
    assert equalized_scale(2) == pytest.approx(1.0, abs=1e-15)
    assert equalized_scale(8) == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(ValueError):
        equalized_scale(0)


def test_runtime_scale_equals_prescaled_weights(rng):
    layer = EqualizedConv2d(3, 4, 3, rng, dtype=np.float64)
    x = rng.standard_normal((2, 3, 5, 5))
    direct = conv2d(x, layer.weight.data * equalized_scale(27), padding=1).data
    np.testing.assert_allclose(layer(Tensor(x)).data, direct, atol=1e-12)


def test_separable_layer_scales(rng):
    layer = EqualizedConv2d(4, 6, 3, rng, mode="dsep", dtype=np.float64)
    assert layer._dw_scale == pytest.approx(1 / 3)
    assert layer._pw_scale == pytest.approx(np.sqrt(2) / 2)
    assert layer(Tensor(rng.standard_normal((1, 4, 5, 5)))).shape == (1, 6, 5, 5)


def test_equalized_layers_start_near_unit_variance(rng):
    lin = EqualizedLinear(256, 256, rng, dtype=np.float64)
    y = lin(Tensor(rng.standard_normal((512, 256)))).data
    assert 1.6 < y.var() < 2.4  # He gain doubles the variance


def test_pixel_norm_unit_rms(rng):
    y = pixel_norm(Tensor(rng.standard_normal((2, 5, 3, 3)) * 7)).data
    np.testing.assert_allclose((y**2).mean(axis=1), 1.0, atol=1e-6)


def test_adam_minimises_a_quadratic():
    p = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = Adam([p], lr=0.1, betas=(0.9, 0.99))
    for _ in range(300):
        opt.zero_grad()
        nx.backward((p * p).sum())
        opt.step()
    assert np.abs(p.data).max() < 0.05


# -- fade ------------------------------------------------------------------


def test_fade_blend_endpoints_and_midpoint():
    c, f = np.zeros((2, 2)), np.full((2, 2), 2.0)
    np.testing.assert_array_equal(fade_blend(c, f, 0.0).data, c)
    np.testing.assert_array_equal(fade_blend(c, f, 1.0).data, f)
    np.testing.assert_array_equal(fade_blend(c, f, 0.5).data, 1.0)


@pytest.mark.parametrize("alpha", [-0.1, 1.5])
def test_fade_blend_rejects_alpha(alpha):
    with pytest.raises(ValueError):
        fade_blend(np.zeros(2), np.zeros(2), alpha)


@given(arrays(np.float64, (6,), elements=st.floats(-9, 9)), arrays(np.float64, (6,), elements=st.floats(-9, 9)),
       st.floats(0, 1))
def test_fade_blend_is_convex(c, f, alpha):
    out = fade_blend(c, f, alpha).data
    assert np.all(out >= np.minimum(c, f) - 1e-12) and np.all(out <= np.maximum(c, f) + 1e-12)


def test_fade_blend_gradient(rng):
    f = Tensor(rng.standard_normal((2, 3)))
    assert grad_check(lambda t: (fade_blend(t, f, 0.3) ** 2).sum(), rng.standard_normal((2, 3))).max_rel_error < 1e-6


# -- schedule ------------------------------------------------------------


def test_schedule_stage_zero_never_fades():
    cfg = TrainConfig(epochs_per_stage=50)
    assert all(fade_alpha(0, e, cfg) == 1.0 for e in range(51))
    assert initial_state().alpha == 1.0


def test_schedule_ramp_value():
    cfg = TrainConfig(epochs_per_stage=50, fade_fraction=0.5)
    assert fade_alpha(1, 13, cfg) == pytest.approx(0.52)
    state = GrowthState(stage=1, alpha=0.48, epochs_in_stage=12, phase="fading")
    assert schedule_step(state, cfg).alpha == pytest.approx(0.52)


def test_schedule_advances_stage():
    cfg = TrainConfig(epochs_per_stage=50, max_stage=3)
    state = GrowthState(stage=1, alpha=1.0, epochs_in_stage=49, phase="stable")
    nxt = schedule_step(state, cfg)
    assert (nxt.stage, nxt.alpha, nxt.phase, nxt.epochs_in_stage) == (2, 0.0, "fading", 0)


def test_schedule_holds_at_max_stage():
    cfg = TrainConfig(epochs_per_stage=4, max_stage=1)
    state = GrowthState(stage=1, alpha=1.0, epochs_in_stage=3, phase="stable")
    assert schedule_step(state, cfg).stage == 1


@given(st.integers(1, 60), st.floats(0.05, 1.0))
def test_schedule_alpha_monotone_and_reaches_one(epochs, frac):
    cfg = TrainConfig(epochs_per_stage=epochs, fade_fraction=frac, max_stage=2)
    state = GrowthState(stage=1, alpha=0.0, epochs_in_stage=0, phase="fading")
    alphas = [state.alpha]
    for _ in range(epochs - 1):
        state = schedule_step(state, cfg)
        alphas.append(state.alpha)
    assert all(b >= a for a, b in zip(alphas, alphas[1:]))
    assert fade_alpha(1, epochs, cfg) == 1.0
    assert all(s == "stable" for a, s in [(state.alpha, state.phase)] if a == 1.0)


def test_growth_state_invariants():
    assert GrowthState(stage=3).resolution == 32
    with pytest.raises(ValueError):
        GrowthState(stage=1, alpha=0.5, phase="stable")


# -- networks ------------------------------------------------------------


@pytest.mark.parametrize("mode", ["vanilla", "dsep"])
def test_network_shapes(mode):
    cfg = tiny(max_stage=2, conv_mode=mode)
    z = sample_latents(cfg, 3, np.random.default_rng(0))
    g0 = build_generator(cfg, GrowthState(stage=0))
    assert g0(z).shape == (3, 3, 4, 4)
    g2 = build_generator(cfg, GrowthState(stage=2))
    d2 = build_discriminator(cfg, GrowthState(stage=2))
    img = g2(z, 0.5)
    assert img.shape == (3, 3, 16, 16)
    assert d2(img, 0.5).shape == (3, 1)


def test_stage_overflow_is_an_error():
    cfg = tiny(max_stage=1)
    with pytest.raises(ValueError):
        build_generator(cfg, GrowthState(stage=2))
    with pytest.raises(ValueError):
        build_discriminator(cfg, GrowthState(stage=2))


def test_discriminator_rejects_wrong_resolution():
    d = build_discriminator(tiny(max_stage=1), GrowthState(stage=1))
    with pytest.raises(ValueError):
        d(np.zeros((2, 3, 4, 4)))


def test_growth_preserves_parameters_bitwise():
    cfg = tiny(max_stage=2)
    g = build_generator(cfg, GrowthState(stage=1))
    d = build_discriminator(cfg, GrowthState(stage=1))
    before_g = {k: v.copy() for k, v in g.state_dict().items()}
    before_d = {k: v.copy() for k, v in d.state_dict().items()}
    build_generator(cfg, GrowthState(stage=2), g)
    build_discriminator(cfg, GrowthState(stage=2), d)
    after_g, after_d = g.state_dict(), d.state_dict()
    for k, v in before_g.items():
        assert after_g[k].tobytes() == v.tobytes()
    for k, v in before_d.items():
        assert after_d[k].tobytes() == v.tobytes()
    assert len(after_g) > len(before_g) and len(after_d) > len(before_d)


def test_grown_network_equals_directly_built():
    cfg = tiny(max_stage=2)
    grown = build_generator(cfg, GrowthState(stage=2), build_generator(cfg, GrowthState(stage=0)))
    direct = build_generator(cfg, GrowthState(stage=2))
    a, b = grown.state_dict(), direct.state_dict()
    assert list(a) == list(b)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_generator_latent_is_normalised():
    g = build_generator(tiny(), GrowthState(stage=0))
    z = np.random.default_rng(1).standard_normal((2, 8)).astype(np.float32)
    np.testing.assert_allclose(g(z).data, g(z * 5.0).data, atol=1e-5)


@pytest.mark.parametrize("mode", ["vanilla", "dsep"])
def test_network_gradients_float64(mode):
    cfg = tiny(max_stage=1, conv_mode=mode, dtype="float64", base_channels=4)
    g = build_generator(cfg, GrowthState(stage=1))
    d = build_discriminator(cfg, GrowthState(stage=1))
    z = sample_latents(cfg, 2, np.random.default_rng(0)).astype(np.float64)
    w = g.to_rgb[1].weight
    w0 = w.data.copy()

    def via_weight(t):
        w.data = t.data
        w_saved = g.to_rgb[1].weight
        g.to_rgb[1].weight = t
        try:
            return d(g(z, 0.6), 0.6).sum()
        finally:
            g.to_rgb[1].weight = w_saved

    assert grad_check(via_weight, w0).max_rel_error < 1e-5
    w.data = w0


# -- loss ----------------------------------------------------------------


def test_gp_of_constant_critic():
    _, _, gp = wgan_gp_loss(lambda x: x.sum(axis=(1,)) * 0.0 + 3.0, np.ones((4, 5)), np.zeros((4, 5)), 10.0, 0)
    assert gp.item() == pytest.approx(10.0)


def test_gp_of_sum_critic():
    d = lambda x: x.sum(axis=1, keepdims=True)
    for lam in (1.0, 10.0):
        _, _, gp = wgan_gp_loss(d, np.ones((3, 4)), np.zeros((3, 4)), lam, 0)
        assert gp.item() == pytest.approx(lam)


def test_loss_plug_in_values():
    d = lambda x: x.mean(axis=1, keepdims=True)
    d_loss, g_loss, gp = wgan_gp_loss(d, np.ones((2, 3)), np.zeros((2, 3)), 0.0, 0)
    assert (d_loss.item(), g_loss.item(), gp.item()) == (-1.0, 0.0, 0.0)


@given(arrays(np.float64, (3, 4), elements=st.floats(-4, 4)), arrays(np.float64, (3, 4), elements=st.floats(-4, 4)))
def test_linear_critic_without_penalty(real, fake):
    v = np.array([0.5, -1.0, 2.0, 0.25])
    d = lambda x: x @ Tensor(v.reshape(4, 1))
    d_loss, _, _ = wgan_gp_loss(d, real, fake, 0.0)
    assert d_loss.item() == pytest.approx(-((real @ v).mean() - (fake @ v).mean()), abs=1e-12)


def test_loss_batches_must_match():
    with pytest.raises(ValueError):
        wgan_gp_loss(lambda x: x, np.zeros((2, 3)), np.zeros((3, 3)), 1.0)


def test_loss_gradient_on_two_layer_critic(rng):
    w1 = rng.standard_normal((6, 5))
    w2 = Tensor(rng.standard_normal((5, 1)))
    real, fake = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))

    def loss(t):
        critic = lambda x: nx.leaky_relu(x @ t) @ w2
        return wgan_gp_loss(critic, real, fake, 10.0, seed=5)[0]

    assert grad_check(loss, w1).max_rel_error < 1e-4


# -- training ------------------------------------------------------------


def blobs(n=16, res=16):
    from progsr.datasets import SyntheticDatasetSpec, render_dataset

    return (render_dataset(SyntheticDatasetSpec(n, res, seed=4)) * 2 - 1).astype(np.float32)


def test_train_artifacts(tmp_path):
    cfg = tiny(max_stage=2, epochs_per_stage=2)
    res = train_progan(cfg, blobs(), tmp_path)
    for k in range(3):
        assert load_checkpoint(tmp_path / f"stage{k}.ckpt").growth_state.stage == k
        assert (tmp_path / f"samples_stage{k}.png").exists()
    rows = list(csv.reader(open(tmp_path / "timing.csv")))
    assert rows[0] == ["stage", "resolution", "conv_mode", "seconds"]
    assert [r[:3] for r in rows[1:]] == [["0", "4", "dsep"], ["1", "8", "dsep"], ["2", "16", "dsep"]]
    assert res.state.stage == 2 and res.state.phase == "stable"
    assert generate(res.generator, np.zeros((2, 8), np.float32) + 1).shape == (2, 3, 16, 16)


def test_train_is_bitwise_deterministic():
    cfg = tiny(max_stage=1, epochs_per_stage=2)
    a = train_progan(cfg, blobs()).generator.state_dict()
    b = train_progan(cfg, blobs()).generator.state_dict()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_resume_matches_uninterrupted(tmp_path):
    cfg = tiny(max_stage=2, epochs_per_stage=2)
    full = train_progan(cfg, blobs(), tmp_path / "full")
    part_cfg = tiny(max_stage=2, epochs_per_stage=2)
    ckpt = load_checkpoint(tmp_path / "full" / "stage1.ckpt")
    resumed = train_progan(part_cfg, blobs(), resume=restore_progan(ckpt, part_cfg))
    a, b = full.generator.state_dict(), resumed.generator.state_dict()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_dataset_smaller_than_batch():
    with pytest.raises(ValueError, match="batch"):
        train_progan(tiny(batch_size=8), blobs(n=4))


def test_non_finite_loss_aborts_with_checkpoint(tmp_path):
    data = blobs()
    data[0, 0, 0, 0] = np.nan
    with pytest.raises(NonFiniteLossError):
        train_progan(tiny(batch_size=16), data, tmp_path)
    assert (tmp_path / "diverged_stage0.ckpt").exists()


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(fade_fraction=0.0)
    with pytest.raises(ValueError):
        TrainConfig(conv_mode="fft")
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    assert TrainConfig(d_learning_rate=4e-3).critic_lr == 4e-3
    assert TrainConfig().critic_lr == TrainConfig().learning_rate
    assert [TrainConfig(base_channels=64).channels(s) for s in range(5)] == [64, 32, 16, 8, 8]
