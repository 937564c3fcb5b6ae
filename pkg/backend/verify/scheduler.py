"""Bucket sizing, sparse-bucket repetition and per-group assignment."""

from __future__ import annotations

from collections import Counter
from typing import List, Tuple

from backend.parallel.buckets import BucketBatchSampler, BucketSpec, batch_size_for, plan_buckets, repeat_sparse
from backend.services.config import RunConfig


def check_batch_sizes(config: RunConfig) -> Tuple[bool, str]:
    got = (batch_size_for(30.0, 30.0), batch_size_for(7.5, 30.0), batch_size_for(45.0, 30.0))
    return got == (1, 4, 1), f"30s->{got[0]}, 7.5s->{got[1]}, 45s->{got[2]}"


def check_repeat_sparse(config: RunConfig) -> Tuple[bool, str]:
    got = repeat_sparse({"dense": 1000, "sparse": 50})
    return got == {"dense": 1000, "sparse": 250}, f"{{1000, 50}} -> {got}"


def simulated_epoch_keys() -> List[Tuple[int, int, int]]:
    """Clip keys of a skewed three-bucket mix at desk resolution."""
    return [(32, 56, 1)] * 40 + [(32, 56, 9)] * 12 + [(32, 56, 17)] * 2


def check_single_type_per_group(config: RunConfig) -> Tuple[bool, str]:
    """Each group's batch holds one (H, W, T); every clip is served its bucket's repeat factor times."""
    specs = plan_buckets(
        [BucketSpec(32, 56, 1, seconds_per_iter=0.25), BucketSpec(32, 56, 9, seconds_per_iter=0.5), BucketSpec(32, 56, 17, seconds_per_iter=1.0)],
        target_iter_seconds=1.0,
    )
    keys = simulated_epoch_keys()
    sampler = BucketBatchSampler(keys, specs, workers=4, sp_size=2, seed=config.seeds.data)
    rows = sampler.epoch(0)
    served: Counter = Counter()
    for row in rows:
        if len(row) != 2:
            return False, f"row with {len(row)} groups, expected 2"
        for batch in row:
            if batch is None:
                continue
            bucket = sampler.buckets[batch.bucket]
            if any(keys[i] != bucket.key for i in batch.indices):
                return False, f"batch of {batch.bucket} holds clips of another shape"
            if len(batch.indices) > bucket.batch_size:
                return False, f"batch of {batch.bucket} exceeds its size {bucket.batch_size}"
            served.update(batch.indices)
    per_bucket = {name: {served[i] for i in members} for name, members in sampler.members.items()}
    uneven = {name: counts for name, counts in per_bucket.items() if len(counts) != 1}
    if uneven:
        return False, f"clips within a bucket served unevenly: {uneven}"
    return True, f"{len(rows)} iterations, serve counts {dict((n, c.pop()) for n, c in per_bucket.items())}"
