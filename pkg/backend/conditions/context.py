"""Condition context: every source encoded, aligned with the latent and ready for cross-attention.

Token sources and their layouts (D = model width):

  text        (B, 1, 1, L, D)    time- and view-invariant
  camera      (B, 1, C, 1, D)    time-invariant, one token per view
  trajectory  (B, T′, 1, 1, D)   shared by all views
  boxes       (B, T′, C, N, D)

Time-invariant sources are broadcast over T′; view-invariant ones over C. The
assembled context for query position (b, k, c) is text ⊕ camera ⊕ trajectory ⊕
boxes with a learned source-type embedding added to each token.

A nulled source is replaced by its learned null token (a single unmasked slot);
a nulled map is the all-zero raster, encoded like any other map.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from backend.autodiff.nn import Module, Parameter
from backend.autodiff.tensor import ShapeError, Tensor, concat
from backend.conditions.boxes import BoxEncoder, BoxTokenSeq, PaddedBoxes, pad_batch, pad_boxes, visible_boxes
from backend.conditions.camera import CameraEncoder, camera_vectors
from backend.conditions.maps import MapEncoder, MapFeatureSet
from backend.conditions.temporal import AlignmentError
from backend.conditions.text import TextEncoder, batch_token_ids
from backend.conditions.trajectory import TrajectoryEncoder, pose_vectors
from backend.codec.latent import latent_frame_count
from backend.scene.records import SceneFrame

SOURCES: Tuple[str, ...] = ("text", "camera", "trajectory", "boxes", "map")
TOKEN_SOURCES = SOURCES[:4]


@dataclass
class ConditionConfig:
    box_encoder_mode: str = "downsample4x"
    fourier_frequencies: int = 4
    scene_radius: float = 50.0
    class_dim: int = 8
    temporal_layers: int = 1
    map_patch: int = 4
    drop_prob: float = 0.15
    trajectory_identity_init: bool = False


@dataclass
class ConditionInputs:
    """Raw per-sample condition arrays for one bucket (shared T and C)."""

    boxes: PaddedBoxes
    poses: np.ndarray
    cameras: np.ndarray
    text_ids: np.ndarray
    text_mask: np.ndarray
    maps: np.ndarray

    @property
    def batch(self) -> int:
        return int(self.poses.shape[0])

    @property
    def frames(self) -> int:
        return int(self.poses.shape[1])

    @property
    def views(self) -> int:
        return int(self.cameras.shape[1])

    @classmethod
    def from_scenes(cls, scenes: Sequence[Sequence[SceneFrame]], slots: int = 0) -> "ConditionInputs":
        frames = {len(s) for s in scenes}
        views = {len(s[0].cameras) for s in scenes}
        if len(frames) != 1 or len(views) != 1:
            raise ShapeError(f"a batch needs one frame count and one view count, got {sorted(frames)} / {sorted(views)}")
        text_ids, text_mask = batch_token_ids([s[0].text for s in scenes])
        return cls(
            boxes=pad_batch([pad_boxes(visible_boxes(s), slots=slots) for s in scenes]),
            poses=np.stack([pose_vectors([f.ego for f in s]) for s in scenes]),
            cameras=np.stack([camera_vectors(s[0].cameras) for s in scenes]),
            text_ids=text_ids,
            text_mask=text_mask,
            maps=np.stack([np.stack([f.map.grid for f in s]).astype(np.float64) for s in scenes]),
        )


@dataclass
class CondContext:
    text: Tensor
    text_mask: np.ndarray
    camera: Tensor
    trajectory: Tensor
    boxes: BoxTokenSeq
    maps: np.ndarray
    frames: int
    null: np.ndarray = field(default=None)

    def __post_init__(self) -> None:
        if self.null is None:
            self.null = np.zeros((self.batch, len(SOURCES)), dtype=bool)

    @property
    def batch(self) -> int:
        return int(self.camera.shape[0])

    @property
    def views(self) -> int:
        return int(self.camera.shape[2])

    @property
    def latent_frames(self) -> int:
        return latent_frame_count(self.frames)

    def with_null(self, flags: np.ndarray) -> "CondContext":
        flags = np.asarray(flags, dtype=bool)
        if flags.shape != self.null.shape:
            raise ShapeError(f"null flags must be {self.null.shape}, got {flags.shape}")
        return replace(self, null=self.null | flags)

    def all_null(self) -> "CondContext":
        return replace(self, null=np.ones_like(self.null))


def check_alignment(ctx: CondContext, latent_frames: int, views: int) -> None:
    expected = ctx.latent_frames
    if latent_frames != expected:
        raise AlignmentError(f"conditions cover {ctx.frames} frames ({expected} latent frames), latent has {latent_frames}")
    for name, length in (("trajectory", ctx.trajectory.shape[1]), ("boxes", ctx.boxes.latent_frames)):
        if length != latent_frames:
            raise AlignmentError(f"{name} tokens have temporal length {length}, latent has {latent_frames}")
    if ctx.views != views or ctx.boxes.tokens.shape[2] != views:
        raise AlignmentError(f"conditions describe {ctx.views} views, latent has {views}")


class ConditionEncoder(Module):
    def __init__(
        self,
        dim: int,
        heads: int,
        rng: np.random.Generator,
        config: Optional[ConditionConfig] = None,
        control_blocks: int = 1,
        flip_window: bool = False,
    ) -> None:
        config = config or ConditionConfig()
        self.dim = dim
        self.text = TextEncoder(dim, rng)
        self.camera = CameraEncoder(dim, rng)
        self.trajectory = TrajectoryEncoder(
            dim,
            heads,
            rng,
            identity_init=config.trajectory_identity_init,
            temporal_layers=config.temporal_layers,
            flip_window=flip_window,
        )
        self.boxes = BoxEncoder(
            dim,
            heads,
            rng,
            mode=config.box_encoder_mode,
            frequencies=config.fourier_frequencies,
            class_dim=config.class_dim,
            scene_radius=config.scene_radius,
            temporal_layers=config.temporal_layers,
            flip_window=flip_window,
        )
        self.maps = MapEncoder(dim, rng, blocks=control_blocks, patch=config.map_patch, flip_window=flip_window)
        self.source_embed = Parameter(rng.normal(0.0, 0.02, size=(len(TOKEN_SOURCES), dim)))
        self.null_tokens = Parameter(rng.normal(0.0, 0.5, size=(len(TOKEN_SOURCES), dim)))

    def encode(self, inputs: ConditionInputs) -> CondContext:
        latent_frame_count(inputs.frames)
        return CondContext(
            text=self.text(inputs.text_ids),
            text_mask=np.asarray(inputs.text_mask, dtype=bool),
            camera=self.camera(inputs.cameras),
            trajectory=self.trajectory(inputs.poses).reshape((inputs.batch, -1, 1, 1, self.dim)),
            boxes=self.boxes(inputs.boxes),
            maps=np.asarray(inputs.maps, dtype=np.float64),
            frames=inputs.frames,
        )

    def assemble(self, ctx: CondContext, latent_frames: int, views: int) -> Tuple[Tensor, np.ndarray]:
        """Cross-attention tokens (B, T′, C, L, D) and mask (B, T′, C, L)."""
        check_alignment(ctx, latent_frames, views)
        batch = ctx.batch
        sources = [
            (ctx.text, ctx.text_mask[:, None, None, :]),
            (ctx.camera, np.ones((batch, 1, views, 1), dtype=bool)),
            (ctx.trajectory, np.ones((batch, latent_frames, 1, 1), dtype=bool)),
            (ctx.boxes.tokens, ctx.boxes.mask),
        ]
        tokens: List[Tensor] = []
        masks: List[np.ndarray] = []
        for i, (values, mask) in enumerate(sources):
            if values.shape[-1] != self.dim:
                raise ShapeError(f"{TOKEN_SOURCES[i]} tokens have width {values.shape[-1]}, expected {self.dim}")
            dropped = ctx.null[:, i]
            keep = (~dropped).astype(np.float64).reshape(batch, 1, 1, 1, 1)
            mixed = values * keep + self.null_tokens[i] * (1.0 - keep)
            mixed = mixed + self.source_embed[i]
            length = values.shape[3]
            mixed = mixed.broadcast_to((batch, latent_frames, views, length, self.dim))
            full = np.broadcast_to(mask, (batch, latent_frames, views, length)).copy()
            full[dropped] = False
            full[dropped, :, :, 0] = True
            tokens.append(mixed)
            masks.append(full)
        return concat(tokens, axis=3), np.concatenate(masks, axis=3)

    def map_features(self, ctx: CondContext, grid: Tuple[int, int]) -> MapFeatureSet:
        keep = (~ctx.null[:, SOURCES.index("map")]).astype(np.float64)
        rasters = ctx.maps * keep.reshape((-1,) + (1,) * (ctx.maps.ndim - 1))
        features = self.maps(rasters, grid)
        if features.features and features.latent_frames != ctx.latent_frames:
            raise AlignmentError(f"map features have {features.latent_frames} latent frames, expected {ctx.latent_frames}")
        return features
