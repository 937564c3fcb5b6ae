"""Sequence-parallel attention against the single-worker reference."""

from __future__ import annotations

import itertools
from typing import Tuple

import numpy as np

from backend.autodiff.nn import MultiHeadAttention
from backend.autodiff.tensor import Tensor, backward
from backend.parallel.sequence import Trace, reference_attention, sp_attention_forward
from backend.services.config import RunConfig

WORKERS = (1, 2, 4)
LENGTHS = (16, 17, 50)
HEADS = (4, 8)
HEAD_WIDTH = 2
FORWARD_TOLERANCE = 1e-10
GRADIENT_TOLERANCE = 1e-8


def sp_gap(workers: int, length: int, heads: int, seed: int = 0) -> Tuple[float, float]:
    """Max abs difference (forward, gradient) between simulated and reference attention."""
    rng = np.random.default_rng([seed, workers, length, heads])
    width = heads * HEAD_WIDTH
    attn = MultiHeadAttention(width, heads, rng)
    x = rng.normal(size=(2, length, width))
    weights = rng.normal(size=(2, length, width))
    params = [p for _, p in attn.named_parameters()]

    results = []
    for run in (lambda t: reference_attention(t, attn), lambda t: sp_attention_forward(t, attn, workers)):
        xt = Tensor(x, requires_grad=True)
        out = run(xt)
        grads = backward((out * weights).sum(), inputs=[xt] + params)
        results.append((out.data, grads))
    (ref, ref_grads), (par, par_grads) = results
    forward = float(np.max(np.abs(ref - par)))
    gradient = max(float(np.max(np.abs(a - b))) for a, b in zip(ref_grads, par_grads))
    return forward, gradient


def check_attention_equivalence(config: RunConfig) -> Tuple[bool, str]:
    worst_fwd, worst_grad = 0.0, 0.0
    for workers, length, heads in itertools.product(WORKERS, LENGTHS, HEADS):
        fwd, grad = sp_gap(workers, length, heads, config.seeds.model)
        worst_fwd, worst_grad = max(worst_fwd, fwd), max(worst_grad, grad)
    passed = worst_fwd <= FORWARD_TOLERANCE and worst_grad <= GRADIENT_TOLERANCE
    return passed, f"forward gap {worst_fwd:.2e}, gradient gap {worst_grad:.2e}"


def check_trace_accounting(config: RunConfig) -> Tuple[bool, str]:
    """Four exchanges per call, P·(P−1) messages each; every byte is accounted for."""
    workers, length, heads = 4, 17, 4
    rng = np.random.default_rng(config.seeds.model)
    attn = MultiHeadAttention(heads * HEAD_WIDTH, heads, rng)
    trace = Trace()
    sp_attention_forward(rng.normal(size=(1, length, heads * HEAD_WIDTH)), attn, workers, trace=trace)
    expected_messages = 4 * workers * (workers - 1)
    # every worker ships (P-1)/P of its padded shard, per phase
    padded = -(-length // workers) * workers
    expected_bytes = 4 * 8 * heads * HEAD_WIDTH * padded * (workers - 1) // workers
    passed = len(trace.messages) == expected_messages and trace.total_bytes() == expected_bytes
    return passed, f"{len(trace.messages)} messages, {trace.total_bytes()} bytes"
