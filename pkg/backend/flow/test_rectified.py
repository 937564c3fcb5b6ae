import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from backend.autodiff.tensor import ShapeError, Tensor
from backend.codec.latent import CodecSpec
from backend.flow.rectified import (
    SamplerConfig,
    cfg_combine,
    cfm_loss,
    draw_flow_sample,
    drop_conditions,
    euler_sample,
    fixed_draws,
    interpolate,
    sample_latents,
    sample_timestep,
)
from backend.services.config import RunConfig
from backend.verify import flow as flow_checks
from backend.verify.fixtures import null_context
from backend.verify.flow import LinearVelocity, linear_learning_curve, oracle_velocity


@pytest.mark.parametrize(
    "check",
    [
        flow_checks.check_interpolation_endpoints,
        flow_checks.check_oracle_euler,
        flow_checks.check_cfg_identity,
        flow_checks.check_condition_drop_rate,
    ],
)
def test_flow_properties_hold(check):
    passed, detail = check(RunConfig())
    assert passed, detail


@settings(max_examples=30)
@given(t=st.floats(0.0, 1.0))
def test_interpolation_is_affine_in_t(t):
    rng = np.random.default_rng(0)
    z1, eps = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    np.testing.assert_allclose(interpolate(z1, eps, t), eps + t * (z1 - eps), atol=1e-12)


def test_per_row_times_broadcast():
    z1, eps = np.ones((2, 3)), np.zeros((2, 3))
    np.testing.assert_allclose(interpolate(z1, eps, np.array([0.25, 0.75])), [[0.25] * 3, [0.75] * 3])


def test_mismatched_noise_is_rejected():
    with pytest.raises(ShapeError):
        interpolate(np.ones((2, 3)), np.ones((3, 2)), 0.5)
    with pytest.raises(ShapeError):
        cfg_combine(np.ones(3), np.ones(4), 2.0)


def test_logit_normal_timesteps_are_in_the_open_unit_interval():
    t = sample_timestep(np.random.default_rng(0), size=10_000)
    assert t.min() > 0.0 and t.max() < 1.0
    assert abs(float(np.median(t)) - 0.5) < 0.02


def test_flow_sample_target_and_fixed_draws():
    z1 = np.random.default_rng(1).normal(size=(3, 2, 2))
    sample = draw_flow_sample(z1, np.random.default_rng(2))
    assert sample.t.shape == (3,)
    np.testing.assert_allclose(sample.z_t, interpolate(z1, sample.eps, sample.t))
    again = fixed_draws([z1], seed=5)[0]
    np.testing.assert_array_equal(again.eps, fixed_draws([z1], seed=5)[0].eps)


def test_loss_is_zero_for_the_true_velocity():
    z1 = np.random.default_rng(3).normal(size=(2, 4))
    sample = draw_flow_sample(z1, np.random.default_rng(4))

    def exact(z, t, ctx=None):
        return Tensor(sample.z1 - sample.eps)

    assert cfm_loss(exact, z1, None, sample=sample).item() == 0.0
    with pytest.raises(ValueError):
        cfm_loss(exact, z1, None)


def test_cfg_extrapolates():
    v, u = np.array([1.0, 2.0]), np.array([0.0, 1.0])
    np.testing.assert_allclose(cfg_combine(v, u, 2.0), [2.0, 3.0])


def test_drop_probability_extremes():
    ctx = null_context(50)
    assert not drop_conditions(ctx, np.random.default_rng(0), 0.0).null.any()
    assert drop_conditions(ctx, np.random.default_rng(0), 1.0).null.all()
    with pytest.raises(ValueError):
        drop_conditions(ctx, np.random.default_rng(0), 1.5)


def test_euler_runs_requested_steps_and_guides_with_all_null_context():
    calls = []

    def model(z, t, ctx):
        calls.append(bool(ctx.null.all()))
        return Tensor(np.zeros_like(z))

    ctx = null_context(1)
    euler_sample(model, (1, 2), ctx, SamplerConfig(steps=4, cfg_scale=2.0))
    assert len(calls) == 8
    assert calls[0::2] == [False] * 4 and calls[1::2] == [True] * 4
    calls.clear()
    euler_sample(model, (1, 2), ctx, SamplerConfig(steps=4, cfg_scale=1.0))
    assert len(calls) == 4


def test_euler_is_seeded():
    model = oracle_velocity(np.zeros((1, 3)))
    a = euler_sample(lambda z, t, c: Tensor(np.zeros_like(z)), (2, 3), None, SamplerConfig(steps=2, seed=9))
    b = euler_sample(lambda z, t, c: Tensor(np.zeros_like(z)), (2, 3), None, SamplerConfig(steps=2, seed=9))
    np.testing.assert_array_equal(a, b)
    assert np.abs(euler_sample(model, (1, 3), None, SamplerConfig(steps=3))).max() < 1e-12


def test_sampled_latents_carry_their_clip_length():
    target = np.random.default_rng(2).normal(size=(2, 3, 2, 1, 1, 4))
    spec = CodecSpec(latent_channels=4)
    latents = sample_latents(oracle_velocity(target), target.shape, None, SamplerConfig(steps=3), spec)
    assert [latent.frames for latent in latents] == [9, 9]
    assert all(latent.spec == spec and latent.shape == (3, 2, 1, 1, 4) for latent in latents)
    np.testing.assert_allclose(latents[1].values, target[1], atol=1e-12)
    with pytest.raises(ShapeError):
        sample_latents(oracle_velocity(target[0]), target.shape[1:], None)


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(steps=0)
    with pytest.raises(ValueError):
        SamplerConfig(cfg_scale=-1.0)


def test_linear_velocity_model_learns():
    before, after = linear_learning_curve(seed=0, steps=200)
    assert after < before


def test_linear_velocity_shapes():
    model = LinearVelocity(3, np.random.default_rng(0))
    out = model(np.zeros((4, 2, 3)), np.array([0.1, 0.2, 0.3, 0.4]))
    assert out.shape == (4, 2, 3)
