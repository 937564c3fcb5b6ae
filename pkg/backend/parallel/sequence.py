"""Deterministic in-process simulator of all-to-all sequence parallelism.

Workers hold contiguous shards of the spatial axis S. Around attention the
shards are exchanged so every worker sees the full sequence for HD/P heads,
then exchanged back. Messages are delivered in a fixed global order
(receiver-major, then sender) so results are bit-reproducible.

Padding: S is padded with zero tokens to a multiple of P. Padded tokens are
masked out as keys and cropped from the gathered output.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from backend.autodiff import functional as F
from backend.autodiff.nn import MultiHeadAttention
from backend.autodiff.tensor import ShapeError, Tensor, as_tensor, concat
from backend.services import logger as project_logger

LOGGER = project_logger.get_logger("parallel.sequence")


@dataclass
class ShardPlan:
    workers: int
    axis: str
    length: int
    padded_length: int
    ranges: List[Tuple[int, int]]

    @property
    def padding(self) -> int:
        return self.padded_length - self.length

    def token_mask(self) -> np.ndarray:
        mask = np.zeros(self.padded_length, dtype=bool)
        mask[: self.length] = True
        return mask


def plan_shards(length: int, workers: int, axis: str = "S") -> ShardPlan:
    if workers < 1:
        raise ValueError(f"worker count must be >= 1, got {workers}")
    padded = -(-length // workers) * workers
    size = padded // workers
    return ShardPlan(
        workers=workers,
        axis=axis,
        length=length,
        padded_length=padded,
        ranges=[(w * size, (w + 1) * size) for w in range(workers)],
    )


@dataclass
class Message:
    worker: int
    peer: int
    phase: str
    bytes: int


@dataclass
class Trace:
    messages: List[Message] = field(default_factory=list)
    iteration: int = 0

    def record(self, worker: int, peer: int, phase: str, nbytes: int) -> None:
        self.messages.append(Message(worker=worker, peer=peer, phase=phase, bytes=nbytes))

    def records(self) -> List[Dict[str, object]]:
        return [{"iteration": self.iteration, **asdict(m)} for m in self.messages]

    def total_bytes(self) -> int:
        return sum(m.bytes for m in self.messages)


def _axis_slice(ndim: int, axis: int, start: int, stop: int) -> Tuple[slice, ...]:
    key = [slice(None)] * ndim
    key[axis] = slice(start, stop)
    return tuple(key)


def shard_sequence(x, workers: int, axis: int = -2) -> Tuple[List[Tensor], ShardPlan]:
    """Split ``x`` along ``axis`` into ``workers`` equal contiguous shards, zero-padding the tail."""
    x = as_tensor(x)
    ax = axis % x.ndim
    plan = plan_shards(x.shape[ax], workers)
    if plan.padding:
        pad_shape = list(x.shape)
        pad_shape[ax] = plan.padding
        x = concat([x, Tensor(np.zeros(pad_shape))], axis=ax)
    shards = [x[_axis_slice(x.ndim, ax, a, b)] for a, b in plan.ranges]
    return shards, plan


def gather_sequence(shards: Sequence[Tensor], plan: ShardPlan, axis: int = -2) -> Tensor:
    full = concat(list(shards), axis=axis)
    ax = axis % full.ndim
    return full[_axis_slice(full.ndim, ax, 0, plan.length)] if plan.padding else full


def all_to_all(
    shards: Sequence[Tensor],
    from_axis: int,
    to_axis: int,
    trace: Optional[Trace] = None,
    phase: str = "",
) -> List[Tensor]:
    """Re-shard: split every shard along ``to_axis``; worker w gathers piece w from each peer along ``from_axis``."""
    workers = len(shards)
    ndim = shards[0].ndim
    src, dst = from_axis % ndim, to_axis % ndim
    total = shards[0].shape[dst]
    if total % workers:
        raise ShapeError(f"all_to_all: axis {to_axis} of length {total} is not divisible by {workers} workers")
    size = total // workers
    out = []
    for w in range(workers):
        pieces = []
        for p in range(workers):
            piece = shards[p][_axis_slice(ndim, dst, w * size, (w + 1) * size)]
            if trace is not None and p != w:
                trace.record(worker=p, peer=w, phase=phase, nbytes=8 * piece.size)
            pieces.append(piece)
        out.append(concat(pieces, axis=src))
    return out


def reference_attention(x, attn: MultiHeadAttention, mask: Optional[np.ndarray] = None) -> Tensor:
    """Single-worker attention over the sequence axis; ``mask`` (S,) marks valid keys."""
    return attn(x, mask=mask)


def sp_attention_forward(
    x,
    attn: MultiHeadAttention,
    workers: int,
    mask: Optional[np.ndarray] = None,
    trace: Optional[Trace] = None,
) -> Tensor:
    """Sequence-parallel self-attention over axis -2 of ``x`` (..., S, W) on ``workers`` simulated ranks."""
    x = as_tensor(x)
    if attn.heads % workers:
        raise ShapeError(f"sequence parallel: {attn.heads} heads are not divisible by {workers} workers")
    shards, plan = shard_sequence(x, workers)
    key_mask = plan.token_mask()
    if mask is not None:
        key_mask[: plan.length] &= np.asarray(mask, dtype=bool)

    projected = [attn.project_qkv(shard) for shard in shards]  # each (..., H, S/P, dh)
    qs, ks, vs = ([p[i] for p in projected] for i in range(3))
    qs = all_to_all(qs, from_axis=-2, to_axis=-3, trace=trace, phase="q:S->HD")
    ks = all_to_all(ks, from_axis=-2, to_axis=-3, trace=trace, phase="k:S->HD")
    vs = all_to_all(vs, from_axis=-2, to_axis=-3, trace=trace, phase="v:S->HD")
    local = [F.attention(q, k, v, mask=key_mask) for q, k, v in zip(qs, ks, vs)]  # (..., H/P, S, dh)
    back = all_to_all(local, from_axis=-3, to_axis=-2, trace=trace, phase="o:HD->S")
    outputs = [attn.out(F.merge_heads(y)) for y in back]
    LOGGER.debug("sp attention: P={} S={} padded={}", workers, plan.length, plan.padded_length)
    return gather_sequence(outputs, plan)
