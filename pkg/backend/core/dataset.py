"""Training clips: scene descriptors, their rendered latents and bucket keys."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from backend.codec.latent import ToyCodec
from backend.conditions.context import ConditionInputs
from backend.parallel.buckets import StagePlan
from backend.scene.raster import render_clip
from backend.scene.records import SceneFrame
from backend.scene.serialize import load_scene
from backend.scene.synth import synth_scene
from backend.services import logger as project_logger
from backend.services.config import DataConfig

LOGGER = project_logger.get_logger("core.dataset")

SEED_STRIDE = 100003


@dataclass
class ClipRecord:
    index: int
    scene: List[SceneFrame]
    latent: np.ndarray  # (T′, C, h′, w′, d)

    @property
    def key(self) -> Tuple[int, int, int]:
        k = self.scene[0].cameras[0].intrinsics
        return (int(k.height), int(k.width), len(self.scene))


def clip_seed(data_seed: int, index: int) -> int:
    return data_seed * SEED_STRIDE + index


def encode_scene(scene: Sequence[SceneFrame], codec: ToyCodec) -> np.ndarray:
    pixels = render_clip(scene).pixels
    return codec.encode(pixels, workers=pixels.shape[1]).values


def synth_clips(data: DataConfig, stage: StagePlan, codec: ToyCodec, data_seed: int) -> List[ClipRecord]:
    """``data.clips`` synthetic clips spread round-robin over the stage's buckets."""
    clips = []
    for i in range(data.clips):
        bucket = stage.buckets[i % len(stage.buckets)]
        spec = replace(data.synth, image_height=bucket.height, image_width=bucket.width)
        scene = synth_scene(clip_seed(data_seed, i), bucket.frames, data.views, spec)
        clips.append(ClipRecord(index=i, scene=scene, latent=encode_scene(scene, codec)))
    return clips


def scene_dir_clips(data: DataConfig, stage: StagePlan, codec: ToyCodec) -> List[ClipRecord]:
    """Serialized scenes whose (H, W, T) matches one of the stage's buckets."""
    keys = {b.key for b in stage.buckets}
    clips = []
    for path in sorted(Path(data.scene_dir).glob("*.yaml")):
        scene = load_scene(str(path))
        k = scene[0].cameras[0].intrinsics
        if (int(k.height), int(k.width), len(scene)) not in keys:
            LOGGER.debug("skipping {}: no bucket for its shape", path.name)
            continue
        clips.append(ClipRecord(index=len(clips), scene=scene, latent=encode_scene(scene, codec)))
    if not clips:
        raise ValueError(f"no scenes in {data.scene_dir} match stage {stage.stage} buckets")
    return clips


def load_clips(data: DataConfig, stage: StagePlan, codec: ToyCodec, data_seed: int) -> List[ClipRecord]:
    if data.source == "scenes":
        return scene_dir_clips(data, stage, codec)
    return synth_clips(data, stage, codec, data_seed)


def batch_inputs(clips: Sequence[ClipRecord]) -> Tuple[ConditionInputs, np.ndarray]:
    """Condition inputs and stacked latents (B, T′, C, h′, w′, d) for one homogeneous batch."""
    return ConditionInputs.from_scenes([c.scene for c in clips]), np.stack([c.latent for c in clips])
