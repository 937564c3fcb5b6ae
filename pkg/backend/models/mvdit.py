"""The MVDiT denoiser: patchify, timestep embedding, base blocks with map-control residuals, final projection.

Control residuals: control block k receives the patch tokens plus map feature
k, runs the same MVDiT block as the base stack and passes its output through a
zero-initialized projection; the result is added to the input of base block
``control_offset + k``. With the default offset the first K base blocks are fed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from backend.autodiff import functional as F
from backend.autodiff.nn import MLP, Linear, Module, ModuleList
from backend.autodiff.tensor import ShapeError, Tensor, as_tensor
from backend.codec.latent import LatentTensor
from backend.conditions.context import CondContext, ConditionConfig, ConditionEncoder
from backend.conditions.maps import MapFeatureSet
from backend.models.blocks import MVDiTBlock, modulate
from backend.parallel.sequence import Trace
from backend.services import logger as project_logger

LOGGER = project_logger.get_logger("models.mvdit")

TIMESTEP_SCALE = 1000.0
MAX_PERIOD = 10000.0


@dataclass
class ModelConfig:
    depth: int = 4
    control_depth: int = 2
    width: int = 128
    heads: int = 4
    patch: int = 1
    mlp_ratio: int = 2
    frequency_dim: int = 64
    rope_base: float = F.ROPE_BASE
    control_offset: int = 0
    cross_view_attention: bool = True
    temporal_attention: bool = True

    def __post_init__(self) -> None:
        if self.depth < 1 or self.heads < 1 or self.patch < 1:
            raise ValueError("depth, heads and patch must all be >= 1")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} must be divisible by heads {self.heads}")
        if (self.width // self.heads) % 2:
            raise ValueError(f"head width {self.width // self.heads} must be even for rotary positions")
        if not 0 <= self.control_depth <= self.depth:
            raise ValueError(f"control_depth {self.control_depth} must lie in [0, depth={self.depth}]")
        if self.control_offset < 0 or self.control_offset + self.control_depth > self.depth:
            raise ValueError(
                f"control blocks {self.control_offset}..{self.control_offset + self.control_depth - 1} "
                f"fall outside the {self.depth} base blocks"
            )
        if self.frequency_dim % 2:
            raise ValueError(f"frequency_dim must be even, got {self.frequency_dim}")

    @property
    def d_tok(self) -> int:
        return self.width


def patchify(latent, patch: int) -> Tensor:
    """(B, T′, C, h′, w′, d) → (B, T′, C, S, patch²·d)."""
    x = as_tensor(latent)
    batch, frames, views, height, width, channels = x.shape
    if height % patch or width % patch:
        raise ShapeError(f"patchify: latent grid {height}x{width} is not divisible by patch {patch}")
    rows, cols = height // patch, width // patch
    x = x.reshape((batch, frames, views, rows, patch, cols, patch, channels))
    x = x.transpose((0, 1, 2, 3, 5, 4, 6, 7))
    return x.reshape((batch, frames, views, rows * cols, patch * patch * channels))


def unpatchify(tokens, patch: int, height: int, width: int) -> Tensor:
    x = as_tensor(tokens)
    batch, frames, views, count, features = x.shape
    rows, cols = height // patch, width // patch
    if rows * cols != count or features % (patch * patch):
        raise ShapeError(f"unpatchify: {count} tokens of width {features} do not tile {height}x{width} at patch {patch}")
    channels = features // (patch * patch)
    x = x.reshape((batch, frames, views, rows, cols, patch, patch, channels))
    x = x.transpose((0, 1, 2, 3, 5, 4, 6, 7))
    return x.reshape((batch, frames, views, height, width, channels))


def timestep_embedding(t, dim: int, max_period: float = MAX_PERIOD) -> np.ndarray:
    """Sinusoidal features of ``t · 1000`` for t in [0, 1]; shape (B, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64)) * TIMESTEP_SCALE
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half, dtype=np.float64) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1)


class FinalLayer(Module):
    """Timestep-modulated norm and projection back to patch channels."""

    def __init__(self, width: int, out_dim: int, rng: np.random.Generator) -> None:
        self.modulation = Linear(width, 2 * width, rng)
        self.proj = Linear(width, out_dim, rng)

    def forward(self, x: Tensor, t_emb: Tensor) -> Tensor:
        width = x.shape[-1]
        mod = self.modulation(F.silu(t_emb)).reshape((x.shape[0], 1, 1, 1, 2 * width))
        return self.proj(modulate(x, mod[..., :width], mod[..., width:]))


class ControlBranch(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator) -> None:
        self.blocks = ModuleList([_make_block(config, rng) for _ in range(config.control_depth)])
        self.outputs = ModuleList([Linear(config.width, config.width, rng, init="zero") for _ in range(config.control_depth)])

    def forward(
        self,
        x: Tensor,
        maps: MapFeatureSet,
        context: Tensor,
        context_mask: np.ndarray,
        t_emb: Tensor,
        view_mask: Optional[np.ndarray] = None,
    ) -> List[Tensor]:
        """One residual (B, T′, C, S, W) per control block."""
        if len(maps.features) != len(self.blocks):
            raise ShapeError(f"control branch: {len(maps.features)} map features for {len(self.blocks)} blocks")
        batch, frames, _, tokens, width = x.shape
        residuals = []
        h = x
        for block, out, feature in zip(self.blocks, self.outputs, maps.features):
            if feature.shape != (batch, frames, tokens, width):
                raise ShapeError(f"control branch: map feature {feature.shape} does not match tokens {x.shape}")
            h = h + feature.reshape((batch, frames, 1, tokens, width))
            h = block(h, context, context_mask, t_emb, view_mask)
            residuals.append(out(h))
        return residuals


def _make_block(config: ModelConfig, rng: np.random.Generator) -> MVDiTBlock:
    return MVDiTBlock(
        config.width,
        config.heads,
        rng,
        mlp_ratio=config.mlp_ratio,
        rope_base=config.rope_base,
        cross_view=config.cross_view_attention,
        temporal=config.temporal_attention,
    )


class MVDiT(Module):
    """Velocity model v(z_t, t, conditions) over multi-view latent video."""

    def __init__(
        self,
        config: ModelConfig,
        latent_channels: int,
        rng: np.random.Generator,
        conditions: Optional[ConditionConfig] = None,
        flip_window: bool = False,
    ) -> None:
        self.config = config
        self.latent_channels = latent_channels
        patch_dim = config.patch * config.patch * latent_channels
        self.patch_embed = Linear(patch_dim, config.width, rng)
        self.time_mlp = MLP(config.frequency_dim, config.width, config.width, rng)
        self.conditions = ConditionEncoder(
            config.width,
            config.heads,
            rng,
            config=conditions,
            control_blocks=config.control_depth,
            flip_window=flip_window,
        )
        self.blocks = ModuleList([_make_block(config, rng) for _ in range(config.depth)])
        self.control = ControlBranch(config, rng)
        self.final = FinalLayer(config.width, patch_dim, rng)

    def set_sequence_parallel(self, workers: int, trace: Optional[Trace] = None) -> None:
        """Route spatial attention of every block through the sequence-parallel simulator.

        When ``trace`` is given, every all-to-all message of later forward passes is recorded in it.
        """
        if self.config.heads % workers:
            raise ShapeError(f"sequence parallel size {workers} does not divide {self.config.heads} heads")
        for block in list(self.blocks) + list(self.control.blocks):
            block.sp_size = workers
            block.sp_trace = trace

    def _prepare(self, z_t, t) -> Tuple[Tensor, Tensor, bool]:
        z = as_tensor(z_t.values if isinstance(z_t, LatentTensor) else z_t)
        unbatched = z.ndim == 5
        if unbatched:
            z = z.reshape((1,) + z.shape)
        if z.ndim != 6 or z.shape[-1] != self.latent_channels:
            raise ShapeError(f"denoiser: expected (B, T′, C, h′, w′, {self.latent_channels}) latent, got {z.shape}")
        t = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=np.float64)), (z.shape[0],))
        t_emb = self.time_mlp(Tensor(timestep_embedding(t, self.config.frequency_dim)))
        return z, t_emb, unbatched

    def forward(
        self,
        z_t,
        t,
        ctx: CondContext,
        view_mask: Optional[np.ndarray] = None,
        use_control: bool = True,
    ) -> Tensor:
        """Velocity prediction with the shape of ``z_t`` ((B,) T′, C, h′, w′, d)."""
        z, t_emb, unbatched = self._prepare(z_t, t)
        batch, frames, views, height, width, _ = z.shape
        patch = self.config.patch
        x = self.patch_embed(patchify(z, patch))
        context, context_mask = self.conditions.assemble(ctx, frames, views)
        if ctx.batch != batch:
            raise ShapeError(f"denoiser: conditions for {ctx.batch} samples, latent batch {batch}")

        injected = {}
        if use_control and self.config.control_depth:
            maps = self.conditions.map_features(ctx, (height // patch, width // patch))
            residuals = self.control(x, maps, context, context_mask, t_emb, view_mask)
            injected = {self.config.control_offset + k: r for k, r in enumerate(residuals)}

        for i, block in enumerate(self.blocks):
            if i in injected:
                x = x + injected[i]
            x = block(x, context, context_mask, t_emb, view_mask)

        out = unpatchify(self.final(x, t_emb), patch, height, width)
        return out.reshape(out.shape[1:]) if unbatched else out

    def init_baseline(self, z_t, t) -> Tensor:
        """The network with every gate closed: final projection of the embedded patches."""
        z, t_emb, unbatched = self._prepare(z_t, t)
        height, width = z.shape[3:5]
        x = self.patch_embed(patchify(z, self.config.patch))
        out = unpatchify(self.final(x, t_emb), self.config.patch, height, width)
        return out.reshape(out.shape[1:]) if unbatched else out


def denoiser_forward(model: MVDiT, z_t, t, ctx: CondContext) -> Tensor:
    return model(z_t, t, ctx)


def build_model(
    config: ModelConfig,
    latent_channels: int,
    seed: int,
    conditions: Optional[ConditionConfig] = None,
    flip_window: bool = False,
) -> MVDiT:
    model = MVDiT(config, latent_channels, np.random.default_rng(seed), conditions=conditions, flip_window=flip_window)
    LOGGER.info("built MVDiT: depth={} control={} width={} params={}", config.depth, config.control_depth, config.width, model.num_parameters())
    return model
