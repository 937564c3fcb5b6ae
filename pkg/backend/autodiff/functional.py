"""Composite layers built from the tensor primitives."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from backend.autodiff.tensor import ArrayLike, ShapeError, Softmax, Tensor, as_tensor, broadcast_shape, concat

ROPE_BASE = 10000.0


def softmax(x: ArrayLike, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Max-shifted softmax; ``mask`` (True = keep) zeroes excluded positions."""
    x = as_tensor(x)
    return Softmax.apply(x, axis=axis, mask=mask)


def layer_norm(x: ArrayLike, gain: ArrayLike, bias: ArrayLike, eps: float = 1e-6) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} must both be ({n},) for input {x.shape}")
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / (var + eps).sqrt() * gain + bias


def normalize(x: ArrayLike, eps: float = 1e-6) -> Tensor:
    """Layer norm without affine parameters."""
    x = as_tensor(x)
    n = x.shape[-1]
    return layer_norm(x, np.ones(n), np.zeros(n), eps)


def gelu(x: ArrayLike) -> Tensor:
    return as_tensor(x).gelu()


def silu(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    return x * x.sigmoid()


def attention(
    q: ArrayLike,
    k: ArrayLike,
    v: ArrayLike,
    mask: Optional[np.ndarray] = None,
    scale: Optional[float] = None,
) -> Tensor:
    """Scaled dot-product attention over the last two axes.

    ``q``: (..., Sq, D), ``k``: (..., Sk, D), ``v``: (..., Sk, Dv). ``mask`` is a
    boolean array broadcastable to (..., Sq, Sk) with True where attention is
    allowed; query rows with every key masked return zeros.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.ndim < 2 or k.ndim != q.ndim or v.ndim != q.ndim:
        raise ShapeError(f"attention: incompatible ranks q{q.shape} k{k.shape} v{v.shape}")
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: key dimension differs for q{q.shape} and k{k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: sequence length differs for k{k.shape} and v{v.shape}")
    broadcast_shape("attention", q.shape[:-2], k.shape[:-2])
    scale = 1.0 / np.sqrt(q.shape[-1]) if scale is None else scale
    scores = (q @ k.swapaxes(-1, -2)) * scale
    weights = softmax(scores, axis=-1, mask=mask)
    return weights @ v


def rope_tables(positions: Sequence[int], dim: int, base: float = ROPE_BASE):
    if dim % 2:
        raise ShapeError(f"rope: feature dimension must be even, got {dim}")
    half = dim // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) * 2.0 / dim)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles), np.sin(angles)


def rope_apply(x: ArrayLike, positions: Sequence[int], base: float = ROPE_BASE) -> Tensor:
    """Rotate feature pairs (i, i + D/2) of ``x`` (..., S, D) by position-dependent angles."""
    x = as_tensor(x)
    dim = x.shape[-1]
    if dim % 2:
        raise ShapeError(f"rope: feature dimension must be even, got {dim}")
    if len(positions) != x.shape[-2]:
        raise ShapeError(f"rope: {len(positions)} positions for sequence axis of length {x.shape[-2]}")
    cos, sin = rope_tables(positions, dim, base)
    half = dim // 2
    x1 = x[..., :half]
    x2 = x[..., half:]
    return concat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


def mse(pred: ArrayLike, target: ArrayLike) -> Tensor:
    diff = as_tensor(pred) - as_tensor(target)
    return (diff * diff).mean()


def split_heads(x: ArrayLike, heads: int) -> Tensor:
    """(..., S, D) → (..., heads, S, D / heads)."""
    x = as_tensor(x)
    dim = x.shape[-1]
    if dim % heads:
        raise ShapeError(f"split_heads: width {dim} is not divisible by {heads} heads")
    shaped = x.reshape(x.shape[:-1] + (heads, dim // heads))
    return shaped.swapaxes(-2, -3)


def merge_heads(x: ArrayLike) -> Tensor:
    """(..., heads, S, d) → (..., S, heads * d)."""
    x = as_tensor(x)
    swapped = x.swapaxes(-2, -3)
    return swapped.reshape(swapped.shape[:-2] + (swapped.shape[-2] * swapped.shape[-1],))
