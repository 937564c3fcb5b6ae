"""Additive map branch input: BEV rasters → per-control-block features on the token grid."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from einops import rearrange

from backend.autodiff.nn import Linear, Module, ModuleList
from backend.autodiff.tensor import ShapeError, Tensor
from backend.conditions.temporal import alignment_matrix, pool_tokens
from backend.scene.records import MAP_CHANNELS


@dataclass
class MapFeatureSet:
    features: List[Tensor]  # per control block, (B, T′, S, D)

    @property
    def latent_frames(self) -> int:
        return int(self.features[0].shape[1]) if self.features else 0


class MapEncoder(Module):
    """Patch convolution, GELU, average pooling to the token grid, window pooling in time.

    The per-block output projections start at zero so the branch adds nothing
    before training.
    """

    def __init__(self, dim: int, rng: np.random.Generator, blocks: int, patch: int = 4, flip_window: bool = False) -> None:
        self.patch = patch
        self.flip_window = flip_window
        self.conv = Linear(patch * patch * len(MAP_CHANNELS), dim, rng)
        self.mix = Linear(dim, dim, rng)
        self.outputs = ModuleList([Linear(dim, dim, rng, init="zero") for _ in range(blocks)])

    def pool_factor(self, cells: Tuple[int, int], grid: Tuple[int, int]) -> Tuple[int, int]:
        rows, cols = cells
        p = self.patch
        if rows % p or cols % p:
            raise ShapeError(f"map grid {rows}x{cols} is not divisible by the patch size {p}")
        gh, gw = grid
        if (rows // p) % gh or (cols // p) % gw:
            raise ShapeError(f"map grid {rows}x{cols} with patch {p} does not pool evenly onto the {gh}x{gw} token grid")
        return (rows // p) // gh, (cols // p) // gw

    def forward(self, maps: np.ndarray, grid: Tuple[int, int]) -> MapFeatureSet:
        """``maps``: (B, T, rows, cols, channels) binary rasters."""
        maps = np.asarray(maps, dtype=np.float64)
        batch, frames = maps.shape[:2]
        fh, fw = self.pool_factor(maps.shape[2:4], grid)
        patches = rearrange(maps, "b t (h p) (w q) c -> b t h w (p q c)", p=self.patch, q=self.patch)
        h = self.conv(Tensor(patches)).gelu()
        gh, gw = grid
        h = h.reshape((batch, frames, gh, fh, gw, fw, h.shape[-1])).mean(axis=(3, 5))
        h = self.mix(h).reshape((batch, frames, gh * gw, h.shape[-1]))
        pooled, _ = pool_tokens(h, alignment_matrix(frames, "downsample4x", flip_window=self.flip_window))
        return MapFeatureSet(features=[proj(pooled) for proj in self.outputs])
