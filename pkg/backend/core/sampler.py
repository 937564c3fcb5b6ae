"""Scene → multi-view video: encode conditions, integrate the flow, decode, dump frames."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from backend.autodiff.tensor import no_grad
from backend.codec.latent import LatentTensor, ToyCodec, latent_shape
from backend.conditions.context import ConditionInputs
from backend.core.trainer import load_model_state
from backend.flow.rectified import SamplerConfig, sample_latents
from backend.models.mvdit import MVDiT, build_model
from backend.scene.records import SceneFrame
from backend.scene.serialize import scene_hash
from backend.services import logger as project_logger
from backend.services.config import RunConfig, config_hash
from backend.services.storage import OutputDir, latent_to_bytes, load_checkpoint, ppm_bytes, split_checkpoint

LOGGER = project_logger.get_logger("core.sampler")

MANIFEST = "manifest.yaml"
LATENT_DUMP = "latent.lat"


@dataclass
class SampleResult:
    pixels: np.ndarray  # (T, C, H, W, 3)
    latent: LatentTensor
    files: List[str]
    manifest: Dict[str, object]


def load_trained_model(config: RunConfig, checkpoint: Optional[str]) -> MVDiT:
    model = build_model(config.model, config.codec.latent_channels, config.seeds.model, conditions=config.conditions)
    if checkpoint:
        _, entries = load_checkpoint(checkpoint)
        params, _ = split_checkpoint(entries)
        load_model_state(model, params)
    return model


def generate(model: MVDiT, scene: Sequence[SceneFrame], codec: ToyCodec, sampler: SamplerConfig) -> SampleResult:
    """Sample one clip for ``scene`` without writing anything."""
    intrinsics = scene[0].cameras[0].intrinsics
    inputs = ConditionInputs.from_scenes([scene])
    with no_grad():
        ctx = model.conditions.encode(inputs)
    shape = (1,) + latent_shape(len(scene), len(scene[0].cameras), int(intrinsics.height), int(intrinsics.width), codec.spec)
    latent = sample_latents(model, shape, ctx, sampler, codec.spec)[0]
    pixels = codec.decode(latent)
    return SampleResult(pixels=np.clip(pixels, 0.0, 1.0), latent=latent, files=[], manifest={})


def frame_name(view: int, frame: int) -> str:
    return f"view{view:02d}_frame{frame:04d}.ppm"


def run_sample(
    config: RunConfig,
    checkpoint: Optional[str],
    scene: Sequence[SceneFrame],
    output: OutputDir,
    seed: Optional[int] = None,
    subdir: str = "samples",
) -> SampleResult:
    sampler = config.sampler if seed is None else replace(config.sampler, seed=seed)
    model = load_trained_model(config, checkpoint)
    result = generate(model, scene, ToyCodec(config.codec), sampler)
    frames, views = result.pixels.shape[:2]
    height, width = result.pixels.shape[2:4]
    files = []
    for c in range(views):
        for t in range(frames):
            name = frame_name(c, t)
            output.write_bytes(ppm_bytes(result.pixels[t, c]), subdir, name)
            files.append(name)
    spec = result.latent.spec
    output.write_bytes(
        latent_to_bytes(result.latent.values, result.latent.frames, height, width, spec.latent_channels, spec.temporal_ratio),
        subdir,
        LATENT_DUMP,
    )
    manifest = {
        "scene_hash": scene_hash(scene),
        "seed": sampler.seed,
        "config_hash": config_hash(config),
        "checkpoint": checkpoint or "",
        "steps": sampler.steps,
        "cfg_scale": sampler.cfg_scale,
        "frames": frames,
        "views": views,
        "files": files,
        "latent": LATENT_DUMP,
    }
    output.write_yaml(manifest, subdir, MANIFEST)
    LOGGER.info("sampled {} frames x {} views into {}", frames, views, output.path(subdir))
    return replace(result, files=files, manifest=manifest)
