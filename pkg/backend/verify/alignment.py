"""Temporal alignment between condition encoders and the codec."""

from __future__ import annotations

from typing import Tuple

import numpy as np

from backend.autodiff.tensor import no_grad
from backend.codec.latent import latent_frame_count, temporal_windows
from backend.conditions.boxes import BoxEncoder
from backend.conditions.context import ConditionEncoder, ConditionInputs
from backend.conditions.temporal import encoder_windows
from backend.core.probes import box_token_variance
from backend.scene.synth import scripted_scene
from backend.services.config import RunConfig
from backend.verify.fixtures import TINY_HEADS, TINY_WIDTH

FRAME_COUNTS = (1, 8, 9, 16, 17, 33, 65, 129, 241)


def expected_latent_frames(frames: int) -> int:
    if frames == 1:
        return 1
    return frames // 4 if frames % 8 == 0 else (frames - 1) // 4 + 1


def check_latent_frame_counts(config: RunConfig) -> Tuple[bool, str]:
    bad = [t for t in FRAME_COUNTS if latent_frame_count(t) != expected_latent_frames(t)]
    return not bad, f"mismatched T: {bad}" if bad else f"{len(FRAME_COUNTS)} frame counts"


def check_box_windows_match_codec(config: RunConfig) -> Tuple[bool, str]:
    """Every encoder pooling window equals the codec window of the same latent frame."""
    for frames in FRAME_COUNTS:
        ours = encoder_windows(frames, flip_window=config.fault.flip_window)
        codec = temporal_windows(frames)
        if ours != codec:
            diff = [(k, a, b) for k, (a, b) in enumerate(zip(ours, codec)) if a != b]
            return False, f"T={frames}: latent frame {diff[0][0]} pools {diff[0][1]}, codec window is {diff[0][2]}"
    return True, f"{len(FRAME_COUNTS)} frame counts"


def check_encoder_lengths(config: RunConfig) -> Tuple[bool, str]:
    """Trajectory, box and map outputs all have the latent temporal length."""
    encoder = ConditionEncoder(
        TINY_WIDTH,
        TINY_HEADS,
        np.random.default_rng(config.seeds.model),
        control_blocks=1,
        flip_window=config.fault.flip_window,
    )
    for frames in FRAME_COUNTS:
        inputs = ConditionInputs.from_scenes([scripted_scene(frames, 1, (10.0, 0.0), (0.1, 0.0))])
        with no_grad():
            ctx = encoder.encode(inputs)
            maps = encoder.map_features(ctx, (4, 7))
        want = latent_frame_count(frames)
        got = {
            "trajectory": ctx.trajectory.shape[1],
            "boxes": ctx.boxes.latent_frames,
            "map": maps.latent_frames,
        }
        wrong = {k: v for k, v in got.items() if v != want}
        if wrong:
            return False, f"T={frames}: expected {want} latent frames, got {wrong}"
    return True, f"{len(FRAME_COUNTS)} frame counts"


def check_reduce_tokens_static(config: RunConfig) -> Tuple[bool, str]:
    """A moving box gives time-varying tokens under downsample4x and constant ones under reduce."""
    scene = scripted_scene(17, 1, (10.0, 0.0), (0.5, 0.3))
    variance = {}
    for mode in ("downsample4x", "reduce"):
        encoder = BoxEncoder(TINY_WIDTH, TINY_HEADS, np.random.default_rng(config.seeds.model), mode=mode)
        variance[mode] = box_token_variance(encoder, scene)
    passed = variance["downsample4x"] > 1e-8 and variance["reduce"] <= 1e-12 * variance["downsample4x"]
    return passed, f"temporal variance downsample4x={variance['downsample4x']:.3e} reduce={variance['reduce']:.3e}"
