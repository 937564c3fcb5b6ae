from dataclasses import replace

import numpy as np
import pytest

from backend.autodiff.tensor import ShapeError, no_grad
from backend.codec.latent import latent_frame_count
from backend.conditions.boxes import BoxEncoder, pad_batch, pad_boxes, visible_boxes
from backend.conditions.camera import CameraEncoder, camera_vectors
from backend.conditions.context import SOURCES, ConditionEncoder, ConditionInputs, check_alignment
from backend.conditions.maps import MapEncoder
from backend.conditions.temporal import BOX_MODES, AlignmentError, alignment_matrix, encoder_windows
from backend.conditions.text import NULL_TOKEN, TOKEN_INDEX, TextEncoder, batch_token_ids, token_ids
from backend.conditions.trajectory import TrajectoryEncoder, pose_vectors
from backend.scene.geometry import camera_ring
from backend.scene.records import OBJECT_CLASSES, Box3D, EgoTransform, GeometryError, TextPrompt, box_corners
from backend.scene.synth import scripted_scene, synth_scene
from backend.verify.alignment import FRAME_COUNTS
from backend.verify.fixtures import perturb

WIDTH, HEADS = 16, 2


def rng(seed=0):
    return np.random.default_rng(seed)


def box(track_id, x=10.0):
    return Box3D(corners=box_corners((x, 0.0, 0.8), (4.5, 1.9, 1.6), 0.0), label=0, track_id=track_id)


def encode_boxes(scene, mode="downsample4x"):
    encoder = BoxEncoder(WIDTH, HEADS, rng(), mode=mode)
    with no_grad():
        return encoder(pad_batch([pad_boxes(visible_boxes(scene))]))


# Alignment matrices


@pytest.mark.parametrize("frames", FRAME_COUNTS)
@pytest.mark.parametrize("mode", BOX_MODES)
def test_alignment_rows_are_averages(frames, mode):
    matrix = alignment_matrix(frames, mode)
    assert matrix.shape == (latent_frame_count(frames), frames)
    np.testing.assert_allclose(matrix.sum(axis=1), 1.0)


def test_flipped_windows_differ_from_codec():
    assert encoder_windows(17, flip_window=True)[-1] == (12, 16)
    assert encoder_windows(1, flip_window=True) == [(0, 1)]


def test_unknown_mode_is_rejected():
    with pytest.raises(ValueError):
        alignment_matrix(9, "mean")
    with pytest.raises(ValueError):
        BoxEncoder(WIDTH, HEADS, rng(), mode="mean")


# Padding


def test_pad_counts_per_view():
    padded = pad_boxes([[[box(1), box(2)], [], [box(1), box(2), box(3)]]])
    assert padded.slots == 3
    assert padded.mask.sum(axis=-1).tolist() == [[2, 0, 3]]


def test_pad_all_empty_keeps_one_slot():
    padded = pad_boxes([[[], []], [[], []]])
    assert padded.slots == 1
    assert not padded.mask.any()


def test_slots_stay_stable_when_a_track_disappears():
    frames = [[[box(7), box(9, x=14.0)]] if t < 8 else [[box(9, x=14.0)]] for t in range(17)]
    padded = pad_boxes(frames)
    slot_of_9 = {int(np.flatnonzero(padded.track_ids[t, 0] == 9)[0]) for t in range(17)}
    assert slot_of_9 == {1}
    assert padded.mask[8:, 0, 0].sum() == 0


def test_returning_track_reclaims_its_slot():
    frames = [[[box(3), box(5)]], [[box(5)]], [[box(3), box(5)]]]
    padded = pad_boxes(frames)
    assert padded.track_ids[0, 0].tolist() == padded.track_ids[2, 0].tolist() == [3, 5]


def test_pad_batch_widens_to_the_largest_sample():
    a = pad_boxes([[[box(1)]]])
    b = pad_boxes([[[box(1), box(2), box(3)]]])
    batch = pad_batch([a, b])
    assert batch.mask.shape == (2, 1, 1, 3)
    assert batch.mask[0].sum() == 1 and batch.track_ids[0, 0, 0, 2] == -1


# Box encoder


@pytest.mark.parametrize("mode", BOX_MODES)
def test_box_tokens_have_latent_length(mode):
    seq = encode_boxes(scripted_scene(17, 1, (10.0, 0.0), (0.3, 0.0)), mode)
    assert seq.latent_frames == 5
    assert seq.tokens.shape == (1, 5, 1, 1, WIDTH)


def test_reduce_mode_repeats_one_step():
    tokens = encode_boxes(scripted_scene(17, 1, (10.0, 0.0), (0.3, 0.0)), "reduce").tokens.data
    np.testing.assert_allclose(tokens, np.broadcast_to(tokens[:, :1], tokens.shape), atol=1e-12)


def test_downsample_tokens_track_motion():
    tokens = encode_boxes(scripted_scene(17, 1, (10.0, 0.0), (0.3, 0.0))).tokens.data[0, :, 0, 0]
    gaps = np.linalg.norm(np.diff(tokens, axis=0), axis=-1)
    assert (gaps > 0).all()


def test_invisible_slots_are_zero():
    scene = scripted_scene(1, 2, (10.0, 0.0), (0.0, 0.0))
    seq = encode_boxes(scene)
    # the rear camera of a two-camera ring cannot see a box straight ahead
    assert not seq.mask[0, 0, 1].any()
    assert not seq.tokens.data[0, 0, 1].any()


def test_padded_slot_contents_never_reach_the_tokens():
    encoder = BoxEncoder(WIDTH, HEADS, rng())
    perturb(encoder, rng(5), scale=0.3)
    padded = pad_batch([pad_boxes(visible_boxes(scripted_scene(9, 2, (10.0, 0.0), (0.3, 0.0))), slots=3)])
    hidden = ~padded.mask
    assert hidden.any() and padded.mask.any()
    fuzz = rng(6)
    fuzzed = replace(
        padded,
        corners=np.where(hidden[..., None, None], fuzz.normal(0.0, 30.0, size=padded.corners.shape), padded.corners),
        labels=np.where(hidden, fuzz.integers(0, len(OBJECT_CLASSES), size=padded.labels.shape), padded.labels),
    )
    with no_grad():
        clean, noisy = encoder(padded), encoder(fuzzed)
    np.testing.assert_array_equal(noisy.mask, clean.mask)
    np.testing.assert_array_equal(noisy.tokens.data, clean.tokens.data)


# Map encoder


def test_map_features_are_zero_at_init():
    maps = rng(1).integers(0, 2, size=(1, 9, 8, 16, 4)).astype(float)
    out = MapEncoder(WIDTH, rng(), blocks=2)(maps, (2, 4))
    assert len(out.features) == 2
    assert all(not f.data.any() for f in out.features)


def test_map_features_temporal_length():
    out = MapEncoder(WIDTH, rng(), blocks=1)(np.zeros((1, 33, 8, 16, 4)), (2, 4))
    assert out.latent_frames == 9
    assert out.features[0].shape == (1, 9, 8, WIDTH)


def test_static_map_gives_static_features():
    encoder = MapEncoder(WIDTH, rng(), blocks=1)
    perturb(encoder, rng(2), scale=0.3)
    static = np.repeat(rng(3).integers(0, 2, size=(1, 1, 8, 16, 4)).astype(float), 17, axis=1)
    features = encoder(static, (1, 2)).features[0].data
    assert np.abs(features).max() > 0
    np.testing.assert_allclose(features, np.broadcast_to(features[:, :1], features.shape), atol=1e-12)


def test_map_grid_must_pool_evenly():
    with pytest.raises(ShapeError):
        MapEncoder(WIDTH, rng(), blocks=1)(np.zeros((1, 1, 8, 16, 4)), (3, 4))


# Trajectory, camera and text


def test_stationary_ego_gives_identical_tokens():
    poses = pose_vectors([EgoTransform.identity()] * 17)[None]
    with no_grad():
        tokens = TrajectoryEncoder(WIDTH, HEADS, rng())(poses).data
    assert tokens.shape == (1, 5, 1, WIDTH)
    np.testing.assert_allclose(tokens, np.broadcast_to(tokens[:, :1], tokens.shape))


def test_straight_motion_is_monotone_along_first_principal_direction():
    egos = [EgoTransform(translation=np.array([0.5 * t, 0.0, 0.0])) for t in range(17)]
    encoder = TrajectoryEncoder(WIDTH, HEADS, rng(), identity_init=True)
    with no_grad():
        tokens = encoder(pose_vectors(egos)[None]).data[0, :, 0]
    centred = tokens - tokens.mean(axis=0)
    direction = np.linalg.svd(centred, full_matrices=False)[2][0]
    steps = np.diff(centred @ direction)
    assert (steps > 0).all() or (steps < 0).all()


def test_trajectory_must_start_at_identity():
    with pytest.raises(GeometryError):
        pose_vectors([EgoTransform(translation=np.array([1.0, 0.0, 0.0]))])


def test_camera_tokens():
    cams = camera_ring(3, 56, 32)
    encoder = CameraEncoder(WIDTH, rng())
    same = encoder(camera_vectors([cams[0], cams[0]])[None]).data
    np.testing.assert_array_equal(same[0, 0, 0], same[0, 0, 1])
    tokens = encoder(camera_vectors(cams)[None]).data
    assert tokens.shape == (1, 1, 3, 1, WIDTH)
    permuted = encoder(camera_vectors([cams[2], cams[0], cams[1]])[None]).data
    np.testing.assert_allclose(permuted[0, 0], tokens[0, 0, [2, 0, 1]])


def test_text_embeddings():
    encoder = TextEncoder(WIDTH, rng())
    assert token_ids(TextPrompt()) == [TOKEN_INDEX[NULL_TOKEN]]
    rainy = encoder(np.array([token_ids(TextPrompt(("rainy",)))])).data
    sunny = encoder(np.array([token_ids(TextPrompt(("sunny",)))])).data
    again = encoder(np.array([token_ids(TextPrompt(("rainy",)))])).data
    np.testing.assert_array_equal(rainy, again)
    assert np.linalg.norm(rainy - sunny) > 0
    null = encoder(np.array([token_ids(TextPrompt())])).data
    np.testing.assert_array_equal(null[0, 0, 0, 0], encoder.table.table.data[TOKEN_INDEX[NULL_TOKEN]])


def test_batch_token_ids_pads_with_mask():
    ids, mask = batch_token_ids([TextPrompt(("rainy", "night")), TextPrompt()])
    assert ids.shape == mask.shape == (2, 2)
    assert mask.tolist() == [[True, True], [True, False]]


# Context assembly


def test_encoded_context_lengths_follow_the_codec():
    encoder = ConditionEncoder(WIDTH, HEADS, rng(), control_blocks=1)
    for frames in (1, 9, 17):
        inputs = ConditionInputs.from_scenes([synth_scene(0, frames, 2)])
        with no_grad():
            ctx = encoder.encode(inputs)
        want = latent_frame_count(frames)
        assert ctx.trajectory.shape[1] == ctx.boxes.latent_frames == want
        tokens, mask = encoder.assemble(ctx, want, 2)
        assert tokens.shape[:3] == (1, want, 2)
        assert mask.shape == tokens.shape[:4]


def test_misaligned_latent_is_rejected():
    encoder = ConditionEncoder(WIDTH, HEADS, rng())
    with no_grad():
        ctx = encoder.encode(ConditionInputs.from_scenes([synth_scene(0, 17, 2)]))
    with pytest.raises(AlignmentError):
        check_alignment(ctx, 4, 2)
    with pytest.raises(AlignmentError):
        encoder.assemble(ctx, 5, 3)


def test_mixed_batch_is_rejected():
    with pytest.raises(ShapeError):
        ConditionInputs.from_scenes([synth_scene(0, 1, 2), synth_scene(1, 9, 2)])


def test_null_sources_become_single_null_token():
    encoder = ConditionEncoder(WIDTH, HEADS, rng())
    with no_grad():
        ctx = encoder.encode(ConditionInputs.from_scenes([synth_scene(0, 1, 2), synth_scene(1, 1, 2)]))
        flags = np.zeros((2, len(SOURCES)), dtype=bool)
        flags[1, SOURCES.index("text")] = True
        tokens, mask = encoder.assemble(ctx.with_null(flags), 1, 2)
    text_len = ctx.text.shape[3]
    assert mask[1, 0, 0, :text_len].tolist() == [True] + [False] * (text_len - 1)
    expected = encoder.null_tokens.data[0] + encoder.source_embed.data[0]
    np.testing.assert_allclose(tokens.data[1, 0, 0, 0], expected)
    assert mask[0, 0, 0, :text_len].all()


def test_null_map_encodes_the_empty_raster():
    encoder = ConditionEncoder(WIDTH, HEADS, rng())
    perturb(encoder, rng(4), scale=0.3)
    with no_grad():
        ctx = encoder.encode(ConditionInputs.from_scenes([synth_scene(0, 1, 1)]))
        nulled = encoder.map_features(ctx.all_null(), (4, 7)).features[0].data
        empty = encoder.maps(np.zeros_like(ctx.maps), (4, 7)).features[0].data
    np.testing.assert_array_equal(nulled, empty)
