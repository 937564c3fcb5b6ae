"""MVDiT block: spatial, cross-view, temporal, condition cross-attention and feed-forward sub-layers.

Token layout is (B, T′, C, S, W). Every sub-layer is wrapped as

    x ← x + gate · sublayer(norm(x) · (1 + scale) + shift)

with (shift, scale, gate) taken from a zero-initialized projection of the
timestep embedding, so a freshly built block is the identity.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from backend.autodiff import functional as F
from backend.autodiff.nn import MLP, Linear, Module, MultiHeadAttention
from backend.autodiff.tensor import ShapeError, Tensor, as_tensor
from backend.parallel.sequence import Trace, sp_attention_forward

SUBLAYERS = ("spatial", "cross_view", "temporal", "cross", "ffn")
MODULATIONS_PER_SUBLAYER = 3


def default_view_mask(views: int) -> np.ndarray:
    """Each view attends to every other view (not itself; spatial attention covers that)."""
    return ~np.eye(views, dtype=bool)


def cross_view_token_mask(view_mask: np.ndarray, tokens: int) -> np.ndarray:
    """Expand a (C, C) view mask to the (C·S, C·S) token mask of the flattened view axis."""
    return np.kron(view_mask.astype(np.int8), np.ones((tokens, tokens), dtype=np.int8)).astype(bool)


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return F.normalize(x) * (1.0 + scale) + shift


class MVDiTBlock(Module):
    def __init__(
        self,
        width: int,
        heads: int,
        rng: np.random.Generator,
        mlp_ratio: int = 2,
        rope_base: float = F.ROPE_BASE,
        cross_view: bool = True,
        temporal: bool = True,
    ) -> None:
        self.width = width
        self.cross_view_enabled = cross_view
        self.temporal_enabled = temporal
        self.sp_size = 1
        self.sp_trace: Optional[Trace] = None
        self.spatial = MultiHeadAttention(width, heads, rng)
        self.cross_view = MultiHeadAttention(width, heads, rng)
        self.temporal = MultiHeadAttention(width, heads, rng, rope_base=rope_base)
        self.cross = MultiHeadAttention(width, heads, rng, context_dim=width)
        self.ffn = MLP(width, width * mlp_ratio, width, rng)
        self.modulation = Linear(width, len(SUBLAYERS) * MODULATIONS_PER_SUBLAYER * width, rng, init="zero")

    def _spatial(self, h: Tensor) -> Tensor:
        if self.sp_size > 1:
            return sp_attention_forward(h, self.spatial, self.sp_size, trace=self.sp_trace)
        return self.spatial(h)

    def _cross_view(self, h: Tensor, view_mask: np.ndarray) -> Optional[Tensor]:
        batch, frames, views, tokens, width = h.shape
        if not self.cross_view_enabled or not view_mask.any():
            return None
        flat = h.reshape((batch, frames, views * tokens, width))
        out = self.cross_view(flat, mask=cross_view_token_mask(view_mask, tokens))
        return out.reshape((batch, frames, views, tokens, width))

    def _temporal(self, h: Tensor) -> Tensor:
        frames = h.shape[1]
        seq = h.transpose((0, 2, 3, 1, 4))  # (B, C, S, T′, W)
        out = self.temporal(seq, positions=list(range(frames)))
        return out.transpose((0, 3, 1, 2, 4))

    def forward(
        self,
        x,
        context: Tensor,
        context_mask: np.ndarray,
        t_emb: Tensor,
        view_mask: Optional[np.ndarray] = None,
    ) -> Tensor:
        """``x`` (B, T′, C, S, W); ``context`` (B, T′, C, L, W); ``t_emb`` (B, W)."""
        x = as_tensor(x)
        if x.ndim != 5 or x.shape[-1] != self.width:
            raise ShapeError(f"mvdit block: expected (B, T′, C, S, {self.width}) tokens, got {x.shape}")
        if context.shape[-1] != self.width:
            raise ShapeError(f"mvdit block: context width {context.shape[-1]} != block width {self.width}")
        batch, _, views = x.shape[:3]
        view_mask = default_view_mask(views) if view_mask is None else np.asarray(view_mask, dtype=bool)
        if view_mask.shape != (views, views):
            raise ShapeError(f"mvdit block: view mask {view_mask.shape} does not match {views} views")

        mod = self.modulation(F.silu(t_emb)).reshape((batch, 1, 1, 1, -1))
        w = self.width
        chunks = [mod[..., i * w : (i + 1) * w] for i in range(len(SUBLAYERS) * MODULATIONS_PER_SUBLAYER)]

        def params(name: str):
            i = SUBLAYERS.index(name) * MODULATIONS_PER_SUBLAYER
            return chunks[i], chunks[i + 1], chunks[i + 2]

        shift, scale, gate = params("spatial")
        x = x + gate * self._spatial(modulate(x, shift, scale))

        shift, scale, gate = params("cross_view")
        out = self._cross_view(modulate(x, shift, scale), view_mask)
        if out is not None:
            x = x + gate * out

        if self.temporal_enabled:
            shift, scale, gate = params("temporal")
            x = x + gate * self._temporal(modulate(x, shift, scale))

        shift, scale, gate = params("cross")
        mask = context_mask[:, :, :, None, None, :]  # (B, T′, C, heads, S, L)
        x = x + gate * self.cross(modulate(x, shift, scale), context=context, mask=mask)

        shift, scale, gate = params("ffn")
        return x + gate * self.ffn(modulate(x, shift, scale))
