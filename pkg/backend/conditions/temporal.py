"""Temporal machinery shared by the time-varying condition encoders.

Frame-level token sequences of length T are brought to the latent length
T′ = latent_frame_count(T) by a (T′, T) alignment matrix:

  - ``downsample4x``: masked mean over the codec's windows (first frame alone
    for odd T, then groups of four).
  - ``reduce``: masked mean over the whole clip, repeated T′ times.
  - ``interp``: linear interpolation of the frame sequence at T′ evenly spaced
    positions.

A latent slot is visible iff some frame with non-zero weight is visible.
"""

from __future__ import annotations

from typing import List, Optional, Tuple

import numpy as np

from backend.autodiff import functional as F
from backend.autodiff.nn import LayerNorm, MLP, Module, ModuleList, MultiHeadAttention
from backend.autodiff.tensor import Tensor, as_tensor
from backend.codec.latent import latent_frame_count, temporal_windows

BOX_MODES = ("downsample4x", "reduce", "interp")


class AlignmentError(ValueError):
    """Condition and latent temporal lengths disagree."""


def encoder_windows(frames: int, ratio: int = 4, flip_window: bool = False) -> List[Tuple[int, int]]:
    """Windows used by the encoders; ``flip_window`` shifts the last one back a frame (fault injection)."""
    windows = temporal_windows(frames, ratio)
    if flip_window and len(windows) > 1:
        a, b = windows[-1]
        windows[-1] = (a - 1, b - 1)
    return windows


def alignment_matrix(frames: int, mode: str = "downsample4x", ratio: int = 4, flip_window: bool = False) -> np.ndarray:
    latent = latent_frame_count(frames)
    if mode == "downsample4x":
        matrix = np.zeros((latent, frames))
        for k, (a, b) in enumerate(encoder_windows(frames, ratio, flip_window)):
            matrix[k, a:b] = 1.0 / (b - a)
        return matrix
    if mode == "reduce":
        return np.full((latent, frames), 1.0 / frames)
    if mode == "interp":
        matrix = np.zeros((latent, frames))
        positions = np.linspace(0.0, frames - 1, latent) if latent > 1 else np.zeros(1)
        for k, p in enumerate(positions):
            lo = int(np.floor(p))
            hi = min(lo + 1, frames - 1)
            frac = p - lo
            matrix[k, lo] += 1.0 - frac
            if frac > 0:
                matrix[k, hi] += frac
        return matrix
    raise ValueError(f"unknown temporal mode '{mode}'; expected one of {BOX_MODES}")


def _time_to_penultimate(ndim: int) -> Tuple[int, ...]:
    """Permutation moving axis 1 (time) next to the feature axis."""
    return (0,) + tuple(range(2, ndim - 1)) + (1, ndim - 1)


def pool_tokens(x: Tensor, matrix: np.ndarray, mask: Optional[np.ndarray] = None) -> Tuple[Tensor, np.ndarray]:
    """Apply an alignment matrix along axis 1 of ``x`` (B, T, ..., D) with visibility ``mask`` (B, T, ...)."""
    x = as_tensor(x)
    frames = x.shape[1]
    if matrix.shape[1] != frames:
        raise AlignmentError(f"alignment matrix expects {matrix.shape[1]} frames, tokens have {frames}")
    mask = np.ones(x.shape[:-1], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    perm = _time_to_penultimate(x.ndim)
    moved = x.transpose(perm)  # (B, ..., T, D)
    m = np.moveaxis(mask, 1, -1)  # (B, ..., T)
    weights = matrix * m[..., None, :]  # (B, ..., T′, T)
    total = weights.sum(axis=-1, keepdims=True)
    weights = np.where(total > 0, weights / np.where(total > 0, total, 1.0), 0.0)
    pooled = Tensor(weights) @ moved  # (B, ..., T′, D)
    out = pooled.transpose(tuple(np.argsort(perm)))
    out_mask = np.moveaxis(total[..., 0] > 0, -1, 1)
    return out, out_mask


class TemporalLayer(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, rope_base: float = F.ROPE_BASE) -> None:
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng, zero_out=True, rope_base=rope_base)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, 2 * dim, dim, rng, zero_out=True)

    def forward(self, x: Tensor, key_mask: np.ndarray) -> Tensor:
        positions = list(range(x.shape[-2]))
        x = x + self.attn(self.norm1(x), mask=key_mask, positions=positions)
        return x + self.mlp(self.norm2(x))


class TemporalTransformer(Module):
    """Self-attention along time with rotary positions, per object/view track.

    Output projections start at zero, so the transformer is the identity at
    initialization. Masked frames are excluded as keys and zeroed on output.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, layers: int = 1, rope_base: float = F.ROPE_BASE) -> None:
        self.layers = ModuleList([TemporalLayer(dim, heads, rng, rope_base) for _ in range(layers)])

    def forward(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        x = as_tensor(x)
        mask = np.ones(x.shape[:-1], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        perm = _time_to_penultimate(x.ndim)
        h = x.transpose(perm)
        m = np.moveaxis(mask, 1, -1)
        key_mask = m[..., None, None, :]  # (B, ..., 1, 1, T) against (B, ..., H, T, T)
        for layer in self.layers:
            h = layer(h, key_mask)
        out = h.transpose(tuple(np.argsort(perm)))
        return out * mask[..., None].astype(np.float64)
