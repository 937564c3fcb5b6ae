from dataclasses import replace

import numpy as np
import pytest

from backend.autodiff.tensor import ShapeError, Tensor, no_grad
from backend.conditions.boxes import PaddedBoxes
from backend.conditions.context import ConditionInputs
from backend.models.blocks import MVDiTBlock, cross_view_token_mask, default_view_mask
from backend.models.mvdit import ModelConfig, build_model, denoiser_forward, patchify, timestep_embedding, unpatchify
from backend.scene.synth import synth_scene
from backend.verify.fixtures import perturb, tiny_batch, tiny_codec, tiny_model_config

CHANNELS = tiny_codec().latent_channels


def tiny_model(seed=0, perturbed=False, **overrides):
    model = build_model(tiny_model_config(**overrides), CHANNELS, seed)
    if perturbed:
        perturb(model, np.random.default_rng(seed + 100), scale=0.1)
    return model


def encoded(model, frames=1, views=2, batch=1):
    inputs, latents = tiny_batch(frames=frames, views=views, batch=batch)
    with no_grad():
        ctx = model.conditions.encode(inputs)
    return ctx, latents


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(width=18, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(width=12, heads=4)  # odd head width
    with pytest.raises(ValueError):
        ModelConfig(depth=2, control_depth=3)
    with pytest.raises(ValueError):
        ModelConfig(depth=2, control_depth=1, control_offset=2)


def test_patchify_layout_and_inverse():
    latent = np.arange(1 * 2 * 1 * 4 * 6 * 3, dtype=float).reshape(1, 2, 1, 4, 6, 3)
    tokens = patchify(latent, 2)
    assert tokens.shape == (1, 2, 1, 6, 12)
    np.testing.assert_array_equal(tokens.data[0, 0, 0, 0, :3], latent[0, 0, 0, 0, 0])
    np.testing.assert_array_equal(unpatchify(tokens, 2, 4, 6).data, latent)
    np.testing.assert_array_equal(patchify(latent, 1).data[0, 0, 0, 7], latent[0, 0, 0, 1, 1])


def test_patchify_requires_divisible_grid():
    with pytest.raises(ShapeError):
        patchify(np.zeros((1, 1, 1, 28, 50, 4)), 4)


def test_timestep_embedding_shape_and_origin():
    emb = timestep_embedding(np.array([0.0, 0.5]), 8)
    assert emb.shape == (2, 8)
    np.testing.assert_array_equal(emb[0], [1.0] * 4 + [0.0] * 4)


def test_fresh_block_is_identity():
    rng = np.random.default_rng(0)
    block = MVDiTBlock(16, 2, rng)
    x = rng.normal(size=(1, 3, 2, 5, 16))
    context = Tensor(rng.normal(size=(1, 3, 2, 4, 16)))
    out = block(x, context, np.ones((1, 3, 2, 4), dtype=bool), Tensor(rng.normal(size=(1, 16))))
    np.testing.assert_array_equal(out.data, x)


def test_view_masks():
    assert default_view_mask(3).tolist() == [[False, True, True], [True, False, True], [True, True, False]]
    token_mask = cross_view_token_mask(default_view_mask(2), 3)
    assert token_mask.shape == (6, 6)
    assert not token_mask[:3, :3].any() and token_mask[:3, 3:].all()


def test_fresh_model_equals_gated_baseline():
    model = tiny_model()
    ctx, latents = encoded(model, frames=9)
    z = np.random.default_rng(1).normal(size=latents.shape)
    with no_grad():
        out = model(z, 0.3, ctx).data
        baseline = model.init_baseline(z, 0.3).data
    assert out.shape == latents.shape
    np.testing.assert_allclose(out, baseline, atol=1e-12)


def test_control_residuals_start_at_zero():
    model = tiny_model()
    ctx, latents = encoded(model)
    z = np.random.default_rng(2).normal(size=latents.shape)
    with no_grad():
        with_control = model(z, 0.5, ctx).data
        without = model(z, 0.5, ctx, use_control=False).data
    np.testing.assert_array_equal(with_control, without)


def test_trained_control_branch_changes_output():
    model = tiny_model(perturbed=True)
    ctx, latents = encoded(model)
    z = np.random.default_rng(3).normal(size=latents.shape)
    with no_grad():
        diff = model(z, 0.5, ctx).data - model(z, 0.5, ctx, use_control=False).data
    assert np.abs(diff).max() > 0


def test_unbatched_latent_keeps_its_shape():
    model = tiny_model(perturbed=True)
    ctx, latents = encoded(model)
    with no_grad():
        batched = model(latents, 0.2, ctx).data
        single = denoiser_forward(model, latents[0], 0.2, ctx).data
    assert single.shape == latents.shape[1:]
    np.testing.assert_allclose(single, batched[0], atol=1e-12)


def test_blocked_cross_view_makes_views_independent():
    model = tiny_model(perturbed=True)
    ctx, latents = encoded(model)
    rng = np.random.default_rng(4)
    z = rng.normal(size=latents.shape)
    changed = z.copy()
    changed[:, :, 1] += rng.normal(size=changed[:, :, 1].shape)
    blocked = np.zeros((2, 2), dtype=bool)
    with no_grad():
        a = model(z, 0.4, ctx, view_mask=blocked).data
        b = model(changed, 0.4, ctx, view_mask=blocked).data
        c = model(changed, 0.4, ctx).data
    np.testing.assert_allclose(a[:, :, 0], b[:, :, 0], atol=1e-12)
    assert np.abs(c[:, :, 0] - a[:, :, 0]).max() > 1e-9


def test_latent_shape_and_alignment_are_checked():
    model = tiny_model()
    ctx, latents = encoded(model)
    with pytest.raises(ShapeError):
        model(np.zeros(latents.shape[:-1] + (CHANNELS + 1,)), 0.5, ctx)
    from backend.conditions.temporal import AlignmentError

    with pytest.raises(AlignmentError):
        model(np.zeros((1, 3) + latents.shape[2:]), 0.5, ctx)


def test_sequence_parallel_model_matches_single_worker():
    model = tiny_model(perturbed=True)
    ctx, latents = encoded(model, frames=9)
    z = np.random.default_rng(5).normal(size=latents.shape)
    with no_grad():
        single = model(z, 0.6, ctx).data
        model.set_sequence_parallel(2)
        sharded = model(z, 0.6, ctx).data
    np.testing.assert_allclose(sharded, single, atol=1e-10)
    with pytest.raises(ShapeError):
        model.set_sequence_parallel(3)


def test_same_seed_builds_same_model():
    a, b = tiny_model(seed=7), tiny_model(seed=7)
    for (name, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data, err_msg=name)


def test_distinct_timesteps_give_distinct_outputs():
    model = tiny_model(perturbed=True)
    ctx, latents = encoded(model, frames=9)
    z = np.random.default_rng(6).normal(size=latents.shape)
    with no_grad():
        early = model(z, 0.2, ctx).data
        late = model(z, 0.7, ctx).data
    assert np.abs(early - late).max() > 1e-6


def test_duplicated_sample_gets_duplicated_rows():
    model = tiny_model(perturbed=True)
    _, latents = tiny_batch(frames=9, views=2)
    scenes = [synth_scene(0, 9, 2), synth_scene(1, 9, 2), synth_scene(0, 9, 2)]
    z = np.random.default_rng(7).normal(size=(3,) + latents.shape[1:])
    z[2] = z[0]
    with no_grad():
        ctx = model.conditions.encode(ConditionInputs.from_scenes(scenes))
        out = model(z, np.array([0.3, 0.8, 0.3]), ctx).data
    np.testing.assert_allclose(out[2], out[0], rtol=0, atol=1e-12)
    assert np.abs(out[1] - out[0]).max() > 1e-9


def test_permuting_views_permutes_the_output():
    model = tiny_model(perturbed=True)
    inputs, latents = tiny_batch(frames=9, views=3)
    perm = [2, 0, 1]
    boxes = inputs.boxes
    permuted = replace(
        inputs,
        cameras=inputs.cameras[:, perm],
        boxes=PaddedBoxes(
            corners=boxes.corners[:, :, perm],
            labels=boxes.labels[:, :, perm],
            track_ids=boxes.track_ids[:, :, perm],
            mask=boxes.mask[:, :, perm],
        ),
    )
    z = np.random.default_rng(8).normal(size=latents.shape)
    with no_grad():
        out = model(z, 0.4, model.conditions.encode(inputs)).data
        swapped = model(z[:, :, perm], 0.4, model.conditions.encode(permuted)).data
    np.testing.assert_allclose(swapped, out[:, :, perm], atol=1e-10)
