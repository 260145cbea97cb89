"""Indicator snapshots and request-conditioned indicators."""

from __future__ import annotations

import random

from routesim import indicators
from routesim.engine import CostModel

from conftest import make_instance, make_record


def test_idle_instance_all_zero_snapshot():
    inst = make_instance()
    snap = indicators.snapshot(inst, now_us=1_000_000)
    assert (snap.r_bs, snap.q_bs, snap.bs) == (0, 0, 0)
    assert snap.pending_prefill_tokens == 0
    assert snap.total_tokens == 0
    assert snap.dc_tokens == 0


def test_snapshot_counts_running_and_queued():
    inst = make_instance()
    for i in range(3):
        inst.enqueue(make_record(request_id=i, input_tokens=16, blocks=(i + 1,), output_tokens=5), 0)
    result = inst.execute_batch(inst.form_batch(0), 0)  # 3 now decoding
    for i in range(3, 5):
        inst.enqueue(make_record(request_id=i, input_tokens=32, blocks=(10 * i, 10 * i + 1)), result.end_us)
    snap = indicators.snapshot(inst, result.end_us)
    assert snap.r_bs == 3
    assert snap.q_bs == 2
    assert snap.bs == 5
    assert snap.pending_prefill_tokens == 64
    # 3 decodes at 16+1 ctx tokens, 2 queued at 32 input tokens
    assert snap.dc_tokens == 3 * 17
    assert snap.total_tokens == 3 * 17 + 2 * 32


def test_snapshot_staleness_hides_recent_admissions():
    inst = make_instance()
    inst.enqueue(make_record(request_id=0, input_tokens=64, blocks=(1, 2, 3, 4)), now_us=100_000)
    fresh = indicators.snapshot(inst, now_us=150_000, staleness_us=0)
    stale = indicators.snapshot(inst, now_us=150_000, staleness_us=100_000)
    later = indicators.snapshot(inst, now_us=250_000, staleness_us=100_000)
    assert fresh.q_bs == 1
    assert stale.q_bs == 0  # admitted 50 ms ago, invisible at 100 ms staleness
    assert later.q_bs == 1


def test_hit_ratio_empty_full_and_partial():
    inst = make_instance()
    blocks = (1, 2, 3, 4)
    record = make_record(blocks=blocks, input_tokens=64)
    assert indicators.kv_hit_ratio(inst, record) == 0.0
    inst.cache.insert(blocks, 0)
    assert indicators.kv_hit_ratio(inst, record) == 1.0
    other = make_record(request_id=1, blocks=(1, 2, 9, 8), input_tokens=64)
    assert indicators.kv_hit_ratio(inst, other) == 0.5  # 2 of 4 blocks


def test_hit_ratio_capped_by_input_tokens():
    # last block only partially covered by input tokens
    inst = make_instance()
    blocks = (1, 2, 3)
    inst.cache.insert(blocks, 0)
    record = make_record(blocks=blocks, input_tokens=40)  # ceil(40/16) = 3 blocks
    assert indicators.kv_hit_ratio(inst, record) == 1.0


def test_p_tokens_idle_no_hits():
    inst = make_instance()
    record = make_record(input_tokens=500, blocks=tuple(range(1, 33)))
    assert indicators.p_tokens(inst, record, now_us=0) == 500


def test_p_tokens_full_hit_floor():
    inst = make_instance()
    blocks = tuple(range(1, 5))
    inst.cache.insert(blocks, 0)
    record = make_record(blocks=blocks, input_tokens=64)
    assert indicators.p_tokens(inst, record, now_us=0) == 1


def test_p_tokens_adds_instance_backlog():
    inst = make_instance(cost_model=CostModel(chunk_tokens=1))  # nothing drains
    backlog = make_record(request_id=0, input_tokens=3000, blocks=tuple(range(1, 189)))
    inst.enqueue(backlog, 0)
    record = make_record(request_id=1, input_tokens=200, blocks=tuple(range(500, 513)))
    snap = indicators.snapshot(inst, 0)
    assert indicators.p_tokens(inst, record, snap) == 3200


def test_hit_queries_do_not_touch_lru():
    inst = make_instance(capacity_blocks=4)
    inst.cache.insert([1, 2], now_us=0)
    inst.cache.insert([11, 12], now_us=1)
    record = make_record(blocks=(1, 2), input_tokens=32)
    for _ in range(5):
        indicators.kv_hit_ratio(inst, record)  # pure reads must not refresh
    inst.cache.insert([21, 22], now_us=2)
    assert inst.cache.match_prefix([1, 2]) == 0  # still evicted as oldest
    assert inst.cache.match_prefix([11, 12]) == 2


def test_p_tokens_lower_bound_property():
    # p_tokens >= input * (1 - hit_ratio) - block_size for random setups
    rng = random.Random(9)
    for _ in range(200):
        inst = make_instance()
        n_blocks = rng.randint(1, 30)
        blocks = tuple(rng.getrandbits(48) for _ in range(n_blocks))
        cached = rng.randint(0, n_blocks)
        if cached:
            inst.cache.insert(blocks[:cached], 0)
        input_tokens = rng.randint((n_blocks - 1) * 16 + 1, n_blocks * 16)
        record = make_record(blocks=blocks, input_tokens=input_tokens)
        p = indicators.p_tokens(inst, record, now_us=0)
        ratio = indicators.kv_hit_ratio(inst, record)
        assert p >= input_tokens * (1.0 - ratio) - 16


def test_snapshot_reconciles_with_engine_counters():
    inst = make_instance(debug=True)  # debug mode reconciles on every event
    now = 0
    rng = random.Random(4)
    for i in range(20):
        inst.enqueue(
            make_record(request_id=i, input_tokens=rng.randint(20, 400),
                        blocks=tuple(range(i * 40 + 1, i * 40 + 1 + (rng.randint(20, 400) + 399) // 16)),
                        output_tokens=rng.randint(1, 6)),
            now,
        )
        plan = inst.form_batch(now)
        if not plan.empty:
            now = inst.execute_batch(plan, now).end_us
    snap = indicators.snapshot(inst, now)
    assert snap.q_bs == len(inst.queue)
    assert snap.r_bs == len(inst.running)
