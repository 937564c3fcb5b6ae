"""Bucketed mixed-resolution / mixed-length scheduling.

A bucket is one (H, W, T) data type with its own batch size. Batch sizes are
chosen so every bucket runs at about the same seconds per iteration. Worker
groups (one per sequence-parallel group) load a single bucket type per
iteration. Sparse buckets are repeated within an epoch so that every type has a
similar number of batches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from backend.codec.latent import CodecError, is_admissible
from backend.services import logger as project_logger

LOGGER = project_logger.get_logger("parallel.buckets")

DEFAULT_MIN_RATIO = 0.25


@dataclass(frozen=True)
class BucketSpec:
    height: int
    width: int
    frames: int
    batch_size: int = 1
    seconds_per_iter: float = 1.0

    def __post_init__(self) -> None:
        if not is_admissible(self.frames):
            raise CodecError(f"bucket {self.name}: frame count {self.frames} is not 1, 8n or 8n+1")
        if self.batch_size < 1:
            raise ValueError(f"bucket {self.name}: batch size must be >= 1")

    @property
    def key(self) -> Tuple[int, int, int]:
        return (self.height, self.width, self.frames)

    @property
    def name(self) -> str:
        return f"{self.frames}x{self.height}x{self.width}"


@dataclass
class StagePlan:
    stage: int
    buckets: List[BucketSpec]
    steps: int
    sp_size: int = 1

    def __post_init__(self) -> None:
        if self.stage not in (1, 2, 3):
            raise ValueError(f"stage id must be 1, 2 or 3, got {self.stage}")
        if not self.buckets:
            raise ValueError(f"stage {self.stage} has no buckets")
        if self.steps < 0 or self.sp_size < 1:
            raise ValueError(f"stage {self.stage}: steps must be >= 0 and sp_size >= 1")


def batch_size_for(cost: float, target: float) -> int:
    if cost <= 0:
        raise ValueError(f"measured cost must be positive, got {cost}")
    return max(1, math.floor(target / cost))


def plan_buckets(specs: Sequence[BucketSpec], target_iter_seconds: float) -> List[BucketSpec]:
    """Batch size per bucket so that batch × cost ≈ target (never below 1)."""
    return [replace(spec, batch_size=batch_size_for(spec.seconds_per_iter, target_iter_seconds)) for spec in specs]


def repeat_factors(counts: Dict[str, int], min_ratio: float = DEFAULT_MIN_RATIO) -> Dict[str, int]:
    if any(c < 0 for c in counts.values()):
        raise ValueError("bucket counts must be >= 0")
    top = max(counts.values(), default=0)
    needed = math.ceil(min_ratio * top)
    factors = {}
    for name, count in counts.items():
        if count == 0 or count >= needed:
            factors[name] = 1
        else:
            factors[name] = -(-needed // count)
    return factors


def repeat_sparse(counts: Dict[str, int], min_ratio: float = DEFAULT_MIN_RATIO) -> Dict[str, int]:
    factors = repeat_factors(counts, min_ratio)
    return {name: count * factors[name] for name, count in counts.items()}


def assign_buckets(batch_counts: Dict[str, int], workers: int, sp_size: int = 1) -> List[List[Optional[str]]]:
    """Bucket name per worker group per iteration for one epoch.

    Groups are filled in a smooth weighted round-robin over the remaining batch
    counts, so each bucket is served exactly ``batch_counts[name]`` times and
    in proportion to its count. Trailing slots of the last iteration may be
    idle (None).
    """
    if sp_size < 1 or workers % sp_size:
        raise ValueError(f"{workers} workers cannot be grouped into sequence-parallel groups of {sp_size}")
    groups = workers // sp_size
    names = sorted(batch_counts)
    weights = {n: batch_counts[n] for n in names if batch_counts[n] > 0}
    total = sum(weights.values())
    current = {n: 0 for n in weights}
    order: List[str] = []
    for _ in range(total):
        for n in weights:
            current[n] += weights[n]
        pick = max(weights, key=lambda n: (current[n], -names.index(n)))
        current[pick] -= total
        order.append(pick)
    iterations: List[List[Optional[str]]] = []
    for start in range(0, len(order), groups):
        row: List[Optional[str]] = list(order[start : start + groups])
        iterations.append(row + [None] * (groups - len(row)))
    return iterations


@dataclass
class BucketBatch:
    bucket: str
    indices: List[int] = field(default_factory=list)


class BucketBatchSampler:
    """Groups clip indices into per-bucket batches and schedules them over worker groups."""

    def __init__(
        self,
        clip_keys: Sequence[Tuple[int, int, int]],
        buckets: Sequence[BucketSpec],
        workers: int = 1,
        sp_size: int = 1,
        min_ratio: float = DEFAULT_MIN_RATIO,
        seed: int = 0,
    ) -> None:
        self.buckets = {b.name: b for b in buckets}
        by_key = {b.key: b.name for b in buckets}
        self.members: Dict[str, List[int]] = {name: [] for name in self.buckets}
        for index, key in enumerate(clip_keys):
            if tuple(key) not in by_key:
                raise ValueError(f"clip {index} with (H, W, T)={tuple(key)} matches no bucket")
            self.members[by_key[tuple(key)]].append(index)
        self.workers = workers
        self.sp_size = sp_size
        self.min_ratio = min_ratio
        self.seed = seed

    def _batches(self, rng: np.random.Generator) -> Dict[str, List[List[int]]]:
        out = {}
        for name in sorted(self.members):
            members = list(self.members[name])
            rng.shuffle(members)
            size = self.buckets[name].batch_size
            out[name] = [members[i : i + size] for i in range(0, len(members), size)]
        return out

    def epoch(self, epoch: int) -> List[List[Optional[BucketBatch]]]:
        rng = np.random.default_rng([self.seed, epoch])
        batches = self._batches(rng)
        factors = repeat_factors({n: len(b) for n, b in batches.items()}, self.min_ratio)
        queues = {n: [BucketBatch(n, list(ix)) for ix in b] * factors[n] for n, b in batches.items()}
        schedule = assign_buckets({n: len(q) for n, q in queues.items()}, self.workers, self.sp_size)
        cursor = {n: 0 for n in queues}
        iterations = []
        for row in schedule:
            out_row: List[Optional[BucketBatch]] = []
            for name in row:
                if name is None:
                    out_row.append(None)
                    continue
                out_row.append(queues[name][cursor[name]])
                cursor[name] += 1
            iterations.append(out_row)
        LOGGER.debug("epoch {}: {} iterations over {} buckets (repeat factors {})", epoch, len(iterations), len(queues), factors)
        return iterations


def full_scale_stage_plans() -> List[StagePlan]:
    """The three-stage full-scale mix: low-resolution images first, long high-resolution videos last."""
    low, mid, high = (224, 400), (424, 800), (848, 1600)

    def mix(res: Tuple[int, int], frames: Sequence[int]) -> List[BucketSpec]:
        return [BucketSpec(res[0], res[1], t) for t in frames]

    return [
        StagePlan(stage=1, buckets=mix(low, [1]), steps=80000),
        StagePlan(stage=2, buckets=mix(low, [1, 9, 17, 33, 65]) + mix(mid, [1, 9, 17, 33]), steps=40000),
        StagePlan(
            stage=3,
            buckets=mix(low, [1, 17, 241]) + mix(mid, [1, 17, 33, 65, 129]) + mix(high, [1, 9, 17, 33]),
            steps=30000,
            sp_size=4,
        ),
    ]
