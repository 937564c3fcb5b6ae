"""Tiny models, scenes and contexts shared by the property checks and the tests."""

from __future__ import annotations

from typing import Tuple

import numpy as np

from backend.autodiff.nn import Module
from backend.autodiff.tensor import Tensor
from backend.codec.latent import CodecSpec, ToyCodec
from backend.conditions.boxes import BoxTokenSeq
from backend.conditions.context import SOURCES, CondContext, ConditionInputs
from backend.core.dataset import encode_scene
from backend.models.mvdit import ModelConfig
from backend.scene.synth import synth_scene

TINY_WIDTH = 16
TINY_HEADS = 2


def tiny_model_config(**overrides) -> ModelConfig:
    values = dict(depth=2, control_depth=1, width=TINY_WIDTH, heads=TINY_HEADS, patch=1, mlp_ratio=2, frequency_dim=8)
    values.update(overrides)
    return ModelConfig(**values)


def tiny_codec() -> CodecSpec:
    return CodecSpec(latent_channels=4)


def tiny_batch(frames: int = 1, views: int = 2, batch: int = 1, seed: int = 0, codec: ToyCodec = None) -> Tuple[ConditionInputs, np.ndarray]:
    """Condition inputs and latents (B, T′, C, h′, w′, d) for ``batch`` synthetic clips."""
    codec = codec or ToyCodec(tiny_codec())
    scenes = [synth_scene(seed + i, frames, views) for i in range(batch)]
    latents = np.stack([encode_scene(s, codec) for s in scenes])
    return ConditionInputs.from_scenes(scenes), latents


def perturb(module: Module, rng: np.random.Generator, scale: float = 0.05) -> None:
    """Move every parameter off its initial value (opens zero-initialized gates)."""
    for _, p in module.named_parameters():
        p.assign(p.data + rng.normal(0.0, scale, size=p.shape))


def null_context(batch: int) -> CondContext:
    """Placeholder context with one-element sources, for dropout statistics."""

    def zeros(*shape: int) -> Tensor:
        return Tensor(np.zeros(shape))

    return CondContext(
        text=zeros(batch, 1, 1, 1, 1),
        text_mask=np.ones((batch, 1), dtype=bool),
        camera=zeros(batch, 1, 1, 1, 1),
        trajectory=zeros(batch, 1, 1, 1, 1),
        boxes=BoxTokenSeq(tokens=zeros(batch, 1, 1, 1, 1), mask=np.ones((batch, 1, 1, 1), dtype=bool)),
        maps=np.zeros((batch, 1, 1, 1, 1)),
        frames=1,
        null=np.zeros((batch, len(SOURCES)), dtype=bool),
    )
