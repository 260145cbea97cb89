"""Class tracking, the batch-size-ratio estimate, and the two-phase alarm."""

from __future__ import annotations

import random

import pytest

from routesim.detector import (
    Detector,
    DetectorConfig,
    class_key,
    estimate_bs_ratio,
    phase1_suspect,
)
from routesim.indicators import IndicatorSnapshot
from routesim.kvcache import PrefixCache
from routesim.policies import Candidate, RoutingDecision

from conftest import make_record


def test_class_key_identical_blocks():
    assert class_key([1, 2, 3]) == class_key([1, 2, 3])


def test_class_key_ignores_blocks_past_k():
    assert class_key([1, 2, 3], 2) == class_key([1, 2, 99], 2)


def test_class_key_differs_on_first_block():
    assert class_key([1, 2]) != class_key([7, 2])


def test_bs_ratio_symmetry():
    assert estimate_bs_ratio(0.5, 123.0, 4, 4, 7.0, 9.0) == 1.0


def test_bs_ratio_degenerate_window():
    assert estimate_bs_ratio(0.9, 55.0, 1, 9, 3.0, 0.0) == 1.0


def test_bs_ratio_direct_evaluation():
    # (0.8/2) / (0.2/14) = 0.4 / 0.014285... = 28, independent of qps and t
    assert estimate_bs_ratio(0.8, 10.0, 2, 14, 0.0, 5.0) == pytest.approx(28.0)
    assert estimate_bs_ratio(0.8, 999.0, 2, 14, 0.0, 77.0) == pytest.approx(28.0)


def test_bs_ratio_domain_errors():
    with pytest.raises(ValueError):
        estimate_bs_ratio(0.5, 1.0, 0, 4, 1.0, 1.0)
    with pytest.raises(ValueError):
        estimate_bs_ratio(0.5, 1.0, 4, 0, 1.0, 1.0)


def test_phase1_examples():
    assert phase1_suspect(0.2, 2, 14)  # 0.25 > 0.1428
    assert not phase1_suspect(0.1, 8, 8)  # 0.111 <= 1
    assert not phase1_suspect(0.0, 1, 15)
    assert phase1_suspect(1.0, 8, 8)  # class takes everything
    assert phase1_suspect(0.5, 16, 0)  # nowhere else to go


def test_benign_condition_implies_ratio_at_most_one():
    # random parameters satisfying the workload bound never produce a
    # holder batch-size ratio above 1
    rng = random.Random(99)
    for _ in range(20_000):
        holders = rng.randint(1, 32)
        others = rng.randint(1, 32)
        x = rng.uniform(0.0, holders / (holders + others))
        ratio = estimate_bs_ratio(
            x,
            rng.uniform(0.0, 1000.0),
            holders,
            others,
            rng.uniform(0.0, 100.0),
            rng.uniform(0.0, 300.0),
        )
        assert ratio <= 1.0 + 1e-12


# -- full detector --------------------------------------------------------------

HOT = (101, 102, 103, 104)
COLD = (201, 202)


def hot_record(i):
    return make_record(request_id=i, blocks=HOT, input_tokens=64)


def cold_record(i):
    return make_record(request_id=i, blocks=(COLD[0], COLD[1], 300 + i), input_tokens=48)


def setup_detector(n=4, holders=(0, 1), window_s=60.0, **kwargs):
    caches = [PrefixCache(None) for _ in range(n)]
    for i in holders:
        caches[i].insert(HOT, now_us=0)
    det = Detector(DetectorConfig(window_s=window_s, **kwargs), caches)
    return det, caches


def snap(bs):
    return IndicatorSnapshot(bs, 0, bs, 0, 0, 0, 0)


def candidates(p_tokens, bs):
    return [
        Candidate(i, snap(bs[i]), 0.0, 32, max(p_tokens[i], 1), p_tokens[i], None)
        for i in range(len(p_tokens))
    ]


def decision(chosen, now_us=0, filtered=frozenset()):
    return RoutingDecision(chosen, {}, frozenset(filtered), "multiplicative", now_us)


def test_m_matches_direct_cache_query():
    det, caches = setup_detector()
    det.observe(hot_record(0), decision(0), candidates([1, 1, 64, 64], [1, 1, 1, 1]), 0)
    stats = det.stats_for(class_key(HOT), 0)
    want = {
        i for i, c in enumerate(caches) if c.match_prefix(HOT[:2]) == 2
    }
    assert set(stats.holders) == want == {0, 1}


def test_phase2_fires_after_consecutive_qualifying_routings():
    det, _ = setup_detector()
    # holders {0,1}: threshold is 2*|M| = 4, so the 5th streak fires
    now = 0
    for i in range(5):
        now = i * 1_000_000
        det.observe(
            hot_record(i),
            decision(0, now),
            candidates([1, 1, 64, 64], [3, 3, 1, 1]),
            now,
        )
        stats = det.stats_for(class_key(HOT), now)
        assert stats.phase == (2 if i >= 4 else 1)
        assert stats.streak == i + 1
    assert not det.verdict(cold_record(99), now).excluded
    assert det.verdict(hot_record(99), now).excluded == frozenset({0, 1})


def test_phase2_streak_resets_on_non_holder_routing():
    det, _ = setup_detector()
    for i in range(3):
        det.observe(hot_record(i), decision(0, i), candidates([1, 1, 64, 64], [3, 3, 1, 1]), i)
    det.observe(hot_record(3), decision(2, 3), candidates([1, 1, 64, 64], [3, 3, 1, 1]), 3)
    stats = det.stats_for(class_key(HOT), 3)
    assert stats.streak == 0
    assert stats.phase == 1  # still suspect, not alarmed


def test_phase2_no_increment_when_product_larger():
    det, _ = setup_detector()
    for i in range(6):
        # chosen holder's product (64*8=512) exceeds best non-holder (64*1=64)
        det.observe(hot_record(i), decision(0, i), candidates([64, 64, 64, 64], [8, 8, 1, 1]), i)
    stats = det.stats_for(class_key(HOT), 5)
    assert stats.streak == 0
    assert stats.phase == 1


def test_phase2_only_fires_while_phase1_suspect():
    det, _ = setup_detector(n=4, holders=(0, 1, 2))
    # 3 holders of 4 instances: benign needs x/(1-x) <= 3, i.e. x <= 0.75
    for i in range(40):
        rid = 2 * i
        det.observe(hot_record(rid), decision(0, rid), candidates([1, 1, 1, 64], [3, 3, 3, 1]), rid)
        det.observe(cold_record(rid + 1), decision(3, rid), candidates([48] * 4, [1] * 4), rid)
    stats = det.stats_for(class_key(HOT), 80)
    assert stats.phase == 0
    assert stats.streak == 0


def test_verdict_scoped_to_alarmed_class_with_cooldown():
    det, _ = setup_detector(window_s=10.0)
    for i in range(5):
        det.observe(hot_record(i), decision(0, i * 1_000_000), candidates([1, 1, 64, 64], [3, 3, 1, 1]), i * 1_000_000)
    t_alarm = 4 * 1_000_000
    assert det.verdict(hot_record(50), t_alarm).excluded == frozenset({0, 1})
    # flood with another class so the hot class decays to benign
    t = t_alarm
    for i in range(200):
        t = t_alarm + (i + 1) * 100_000
        det.observe(cold_record(100 + i), decision(2, t), candidates([48] * 4, [1] * 4), t)
        if t - t_alarm < 9_000_000:
            # benign for less than a full window: mitigation still active
            assert det.verdict(hot_record(51), t).excluded or det.stats_for(class_key(HOT), t).phase == 2
    # after a full benign window the alarm has cleared
    assert det.verdict(hot_record(52), t).empty


def test_force_least_bs_mitigation():
    det, _ = setup_detector(mitigation="force_least_bs")
    for i in range(5):
        det.observe(hot_record(i), decision(0, i), candidates([1, 1, 64, 64], [3, 3, 1, 1]), i)
    verdict = det.verdict(hot_record(9), 5)
    assert verdict.force_least_bs and not verdict.excluded


def test_window_accounting_matches_recount():
    det, _ = setup_detector(window_s=30.0)
    log = []
    rng = random.Random(12)
    t_s = 0
    for i in range(300):
        t_s += rng.randint(0, 2)
        now = t_s * 1_000_000
        if rng.random() < 0.3:
            rec = hot_record(i)
        else:
            rec = cold_record(i)
        log.append((t_s, rec.class_key if len(rec.prefix_blocks) < 2 else class_key(rec.prefix_blocks)))
        det.observe(rec, decision(0, now), candidates([1, 1, 64, 64], [1, 1, 1, 1]), now)
        # recount the hot fraction from the shadow log (bucket granularity)
        stats = det.stats_for(class_key(HOT), now)
        in_window = [(s, k) for s, k in log if s > t_s - 30]
        want = sum(1 for _, k in in_window if k == class_key(HOT))
        assert stats.arrivals_in_window == want
        if in_window:
            assert stats.fraction == pytest.approx(want / len(in_window))
    assert det._total_count >= sum(tr.window_count for tr in det._tracks.values()) / len(det._tracks)


def test_detector_rows_emitted_per_window():
    det, _ = setup_detector(window_s=2.0)
    for i in range(10):
        det.observe(hot_record(i), decision(0, i * 1_000_000), candidates([1, 1, 64, 64], [1] * 4), i * 1_000_000)
    rows = det.finalize(10_000_000)
    assert rows
    starts = [r.window_start_s for r in rows]
    assert starts == sorted(starts)
    assert all(r.n_holders + r.n_others == 4 for r in rows)
