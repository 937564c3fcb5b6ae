from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from backend.autodiff.nn import MultiHeadAttention
from backend.autodiff.tensor import ShapeError
from backend.codec.latent import CodecError
from backend.parallel.buckets import (
    BucketBatchSampler,
    BucketSpec,
    StagePlan,
    assign_buckets,
    batch_size_for,
    full_scale_stage_plans,
    plan_buckets,
    repeat_factors,
    repeat_sparse,
)
from backend.parallel.sequence import (
    Trace,
    all_to_all,
    gather_sequence,
    plan_shards,
    shard_sequence,
    sp_attention_forward,
)
from backend.services.config import RunConfig
from backend.verify import scheduler as scheduler_checks
from backend.verify import sequence as sequence_checks
from backend.verify.sequence import sp_gap

# Buckets


@pytest.mark.parametrize("cost,expected", [(30.0, 1), (7.5, 4), (45.0, 1), (10.0, 3)])
def test_batch_size_examples(cost, expected):
    assert batch_size_for(cost, 30.0) == expected


def test_batch_size_needs_positive_cost():
    with pytest.raises(ValueError):
        batch_size_for(0.0, 30.0)


def test_plan_buckets_sets_sizes():
    planned = plan_buckets([BucketSpec(32, 56, 1, seconds_per_iter=0.25), BucketSpec(32, 56, 17, seconds_per_iter=2.0)], 1.0)
    assert [b.batch_size for b in planned] == [4, 1]


def test_bucket_frame_count_must_be_admissible():
    with pytest.raises(CodecError):
        BucketSpec(32, 56, 10)


def test_stage_plan_validation():
    with pytest.raises(ValueError):
        StagePlan(stage=4, buckets=[BucketSpec(32, 56, 1)], steps=1)
    with pytest.raises(ValueError):
        StagePlan(stage=1, buckets=[], steps=1)


def test_repeat_sparse_example():
    assert repeat_sparse({"dense": 1000, "sparse": 50}) == {"dense": 1000, "sparse": 250}
    assert repeat_factors({"a": 10, "b": 0}) == {"a": 1, "b": 1}


@settings(max_examples=50)
@given(counts=st.dictionaries(st.sampled_from("abcdef"), st.integers(0, 200), min_size=1))
def test_repeated_counts_reach_the_floor(counts):
    repeated = repeat_sparse(counts)
    top = max(counts.values())
    for name, count in counts.items():
        assert repeated[name] % max(count, 1) == 0 or count == 0
        if count:
            assert repeated[name] >= min(count, np.ceil(0.25 * top))


@settings(max_examples=50)
@given(
    counts=st.dictionaries(st.sampled_from("abcde"), st.integers(0, 30), min_size=1),
    groups=st.integers(1, 4),
    sp=st.sampled_from([1, 2]),
)
def test_assignment_serves_every_batch_exactly_once(counts, groups, sp):
    rows = assign_buckets(counts, workers=groups * sp, sp_size=sp)
    served = Counter(name for row in rows for name in row if name is not None)
    assert {n: c for n, c in served.items()} == {n: c for n, c in counts.items() if c}
    assert all(len(row) == groups for row in rows)
    assert all(name is not None for row in rows[:-1] for name in row)


def test_assignment_rejects_uneven_groups():
    with pytest.raises(ValueError):
        assign_buckets({"a": 3}, workers=3, sp_size=2)


def test_sampler_epochs_are_seeded():
    specs = plan_buckets([BucketSpec(32, 56, 1, seconds_per_iter=0.5), BucketSpec(32, 56, 9, seconds_per_iter=1.0)], 1.0)
    keys = [(32, 56, 1)] * 7 + [(32, 56, 9)] * 3
    sampler = BucketBatchSampler(keys, specs, workers=2, seed=3)
    first = [[(b.bucket, b.indices) if b else None for b in row] for row in sampler.epoch(0)]
    again = [[(b.bucket, b.indices) if b else None for b in row] for row in sampler.epoch(0)]
    assert first == again
    with pytest.raises(ValueError):
        BucketBatchSampler([(64, 64, 1)], specs)


@pytest.mark.parametrize(
    "check",
    [scheduler_checks.check_batch_sizes, scheduler_checks.check_repeat_sparse, scheduler_checks.check_single_type_per_group],
)
def test_scheduler_properties_hold(check):
    passed, detail = check(RunConfig())
    assert passed, detail


def test_full_scale_stage_plans():
    plans = full_scale_stage_plans()
    assert [p.stage for p in plans] == [1, 2, 3]
    assert [b.frames for b in plans[0].buckets] == [1]
    assert plans[2].sp_size == 4
    assert max(b.frames for b in plans[2].buckets) == 241


# Sequence parallelism


def test_shard_plan_pads_to_a_multiple():
    plan = plan_shards(17, 4)
    assert plan.padded_length == 20 and plan.padding == 3
    assert plan.ranges == [(0, 5), (5, 10), (10, 15), (15, 20)]
    assert plan.token_mask().sum() == 17


def test_shard_and_gather_roundtrip():
    x = np.random.default_rng(0).normal(size=(2, 17, 3))
    shards, plan = shard_sequence(x, 4)
    assert all(s.shape == (2, 5, 3) for s in shards)
    np.testing.assert_array_equal(gather_sequence(shards, plan).data, x)


def test_all_to_all_moves_pieces_between_axes():
    x = np.arange(2 * 4 * 3, dtype=float).reshape(2, 4, 3)  # (heads, S, d)
    shards, _ = shard_sequence(x, 2)
    moved = all_to_all(shards, from_axis=-2, to_axis=-3)
    np.testing.assert_array_equal(moved[0].data, x[:1])
    np.testing.assert_array_equal(moved[1].data, x[1:])


@pytest.mark.parametrize("workers,length,heads", [(1, 16, 4), (2, 17, 4), (4, 50, 8), (4, 17, 4)])
def test_sequence_parallel_matches_reference(workers, length, heads):
    forward, gradient = sp_gap(workers, length, heads)
    assert forward <= sequence_checks.FORWARD_TOLERANCE
    assert gradient <= sequence_checks.GRADIENT_TOLERANCE


def test_trace_accounting_property():
    passed, detail = sequence_checks.check_trace_accounting(RunConfig())
    assert passed, detail


def test_single_worker_sends_nothing():
    rng = np.random.default_rng(0)
    attn = MultiHeadAttention(8, 4, rng)
    trace = Trace(iteration=3)
    sp_attention_forward(rng.normal(size=(1, 6, 8)), attn, 1, trace=trace)
    assert trace.messages == [] and trace.total_bytes() == 0


def test_trace_records_are_ordered_and_tagged():
    rng = np.random.default_rng(1)
    attn = MultiHeadAttention(8, 4, rng)
    trace = Trace(iteration=2)
    sp_attention_forward(rng.normal(size=(1, 8, 8)), attn, 2, trace=trace)
    records = trace.records()
    assert [r["phase"] for r in records] == ["q:S->HD"] * 2 + ["k:S->HD"] * 2 + ["v:S->HD"] * 2 + ["o:HD->S"] * 2
    assert all(r["iteration"] == 2 for r in records)


def test_heads_must_divide_workers():
    attn = MultiHeadAttention(8, 4, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        sp_attention_forward(np.zeros((1, 6, 8)), attn, 3)


def test_masked_keys_match_reference():
    rng = np.random.default_rng(2)
    attn = MultiHeadAttention(8, 4, rng)
    x = rng.normal(size=(1, 10, 8))
    mask = np.arange(10) < 7
    reference = attn(x, mask=mask).data
    np.testing.assert_allclose(sp_attention_forward(x, attn, 4, mask=mask).data, reference, atol=1e-10)
