"""Global scheduler and discrete-event loop.

Arrival and engine events share one queue with a deterministic total
order: (time, kind, instance, sequence), arrivals before engine steps at
equal times so a request can join a batch formed at the same instant.
Routing itself is instantaneous in simulation time.

The optional parallel mode advances instances independently between
scheduler decisions and merges their events back into the same total
order; it produces reports identical to the sequential mode and exists to
demonstrate that instances only interact through routing decisions.
"""

from __future__ import annotations

import hashlib
import heapq
from dataclasses import dataclass, field
from typing import Sequence

from . import indicators
from .detector import Detector, DetectorConfig
from .engine import CostModel, InstanceSim, StepResult
from .hashing import chain_keys, stable_key
from .kvcache import PrefixCache
from .metrics import Collector, RequestMetrics, RunReport
from .policies import Candidate, Policy, PolicyConfig, RoutingDecision
from .trace import TraceRecord, scale_trace, validate_against_block_size


@dataclass(frozen=True)
class CacheConfig:
    block_size: int = 16
    capacity_blocks: int | None = 40_000  # None = infinite

    def validate(self) -> None:
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        if self.capacity_blocks is not None and self.capacity_blocks < 1:
            raise ValueError("capacity_blocks must be >= 1 or None")


@dataclass(frozen=True)
class ClusterConfig:
    n_instances: int = 16
    cost_model: CostModel = field(default_factory=CostModel)
    cache: CacheConfig = field(default_factory=CacheConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    detector: DetectorConfig | None = None
    staleness_ms: float = 0.0
    seed: int = 0
    debug_checks: bool = False
    parallel_instances: bool = False

    def validate(self) -> None:
        if self.n_instances < 1:
            raise ValueError("n_instances must be >= 1")
        if self.staleness_ms < 0:
            raise ValueError("staleness_ms must be >= 0")
        self.cost_model.validate()
        self.cache.validate()
        self.policy.validate()
        if self.detector is not None:
            self.detector.validate()


_ARRIVAL, _STEP = 0, 1


class ClusterSim:
    """A cluster of instances plus one global routing policy."""

    def __init__(self, config: ClusterConfig) -> None:
        config.validate()
        self.config = config
        self.block_size = config.cache.block_size
        self.staleness_us = round(config.staleness_ms * 1000.0)
        self.instances = [
            InstanceSim(
                i,
                config.cost_model,
                PrefixCache(config.cache.capacity_blocks),
                self.block_size,
                debug=config.debug_checks,
            )
            for i in range(config.n_instances)
        ]
        # the cluster seed shifts the tie-break rotation so reruns with a
        # new seed explore different symmetric splits
        self.policy = Policy(
            config.policy,
            config.cost_model,
            tie_seed=stable_key(config.seed, config.policy.tie_break_seed),
        )
        self.detector = (
            Detector(config.detector, [inst.cache for inst in self.instances])
            if config.detector is not None
            else None
        )
        self.collector = Collector(
            config.policy.kind, config.seed, config.n_instances, self.block_size
        )

    # -- one routing decision ----------------------------------------------

    def build_candidates(
        self, record: TraceRecord, now_us: int, keys: list[int] | None = None
    ) -> list[Candidate]:
        if keys is None:
            keys = chain_keys(record.prefix_blocks)
        candidates = []
        for inst in self.instances:
            snap = indicators.snapshot(inst, now_us, self.staleness_us)
            hit_blocks = inst.cache.match_keys(keys)
            hit_tok = min(hit_blocks * self.block_size, record.input_tokens)
            new_tok = max(record.input_tokens - hit_tok, 1)
            candidates.append(
                Candidate(
                    instance_id=inst.id,
                    snapshot=snap,
                    hit_ratio=hit_tok / record.input_tokens,
                    hit_tokens=hit_tok,
                    new_prefill_tokens=new_tok,
                    p_tokens=snap.pending_prefill_tokens + new_tok,
                    instance=inst,
                )
            )
        return candidates

    def route(self, record: TraceRecord, now_us: int) -> RoutingDecision:
        """Snapshot, consult the detector, score, enqueue, account."""
        keys = chain_keys(record.prefix_blocks)
        candidates = self.build_candidates(record, now_us, keys)
        verdict = self.detector.verdict(record, now_us) if self.detector else None
        decision = self.policy.choose(candidates, record, now_us, verdict)
        inst = self.instances[decision.chosen]
        admission = inst.enqueue(record, now_us, keys)
        if self.detector:
            self.detector.observe(record, decision, candidates, now_us)
        self.collector.on_route(
            RequestMetrics(
                request_id=record.request_id,
                class_key=record.class_key,
                arrival_us=now_us,
                chosen_instance=decision.chosen,
                input_tokens=record.input_tokens,
                output_tokens=record.output_tokens,
                hit_tokens=admission.hit_tokens,
            )
        )
        self.collector.record_bs(
            inst.id, now_us, len(inst.queue) + len(inst.running)
        )
        return decision

    # -- event loop -----------------------------------------------------------

    def _apply_step(
        self, inst: InstanceSim, result: StepResult, start_us: int, bs_after: int
    ) -> None:
        self.collector.on_step(
            inst.id, start_us, result.end_us, result.prefill_us, result.first_scheduled
        )
        for event in result.events:
            self.collector.on_event(event)
        # batch-size changes commit when the step is launched
        self.collector.record_bs(inst.id, start_us, bs_after)
        if self.config.debug_checks:
            inst.reconcile()
            inst.cache.check_invariants()

    def run_trace(self, records: Sequence[TraceRecord]) -> RunReport:
        validate_against_block_size(records, self.block_size)
        ids = set()
        prev = -1.0
        for r in records:
            if r.request_id in ids:
                raise ValueError(f"duplicate request id {r.request_id} in trace")
            ids.add(r.request_id)
            if r.arrival_s < prev:
                raise ValueError("trace arrivals are not sorted")
            prev = r.arrival_s

        digest = hashlib.sha256()
        for r in records:
            digest.update(f"{r.request_id}:{round(r.arrival_s * 1e6)}\n".encode())
        arrivals_hash = digest.hexdigest()

        if self.config.parallel_instances:
            end_us, queued_last = self._loop_parallel(records)
        else:
            end_us, queued_last = self._loop_sequential(records)

        detector_rows = self.detector.finalize(end_us) if self.detector else None
        return self.collector.finalize(
            end_us,
            arrivals_hash,
            queued_last,
            detector_rows,
            self.detector.first_violation_us if self.detector else None,
        )

    def _loop_sequential(self, records: Sequence[TraceRecord]) -> tuple[int, int]:
        heap: list[tuple[int, int, int, int]] = []
        payload: dict[int, TraceRecord] = {}
        for i, r in enumerate(records):
            heap.append((round(r.arrival_s * 1e6), _ARRIVAL, i, 0))
            payload[i] = r
        heapq.heapify(heap)
        scheduled = [False] * len(self.instances)
        seq = 0
        remaining_arrivals = len(records)
        queued_last = 0
        end_us = 0
        while heap:
            t, kind, who, _ = heapq.heappop(heap)
            end_us = max(end_us, t)
            if kind == _ARRIVAL:
                record = payload.pop(who)
                decision = self.route(record, t)
                remaining_arrivals -= 1
                if remaining_arrivals == 0:
                    queued_last = sum(len(i.queue) for i in self.instances)
                chosen = decision.chosen
                inst = self.instances[chosen]
                if not scheduled[chosen] and inst.busy_until_us <= t:
                    seq += 1
                    scheduled[chosen] = True
                    heapq.heappush(heap, (t, _STEP, chosen, seq))
            else:
                inst = self.instances[who]
                scheduled[who] = False
                plan = inst.form_batch(t)
                if plan.empty:
                    continue
                result = inst.execute_batch(plan, t)
                self._apply_step(inst, result, t, len(inst.queue) + len(inst.running))
                seq += 1
                scheduled[who] = True
                heapq.heappush(heap, (result.end_us, _STEP, who, seq))
                end_us = max(end_us, result.end_us)
        return end_us, queued_last

    def _loop_parallel(self, records: Sequence[TraceRecord]) -> tuple[int, int]:
        """Advance instances independently between arrivals; merge events."""
        next_step: list[int | None] = [None] * len(self.instances)
        end_us = 0
        queued_last = 0

        def drain(until_us: int | None) -> None:
            # steps scheduled exactly at an arrival time run after it, same
            # as the sequential tie-break (arrival first)
            nonlocal end_us
            buffer: list[tuple[int, int, int, InstanceSim, StepResult, int]] = []
            for inst in self.instances:
                idx = 0
                while next_step[inst.id] is not None and (
                    until_us is None or next_step[inst.id] < until_us
                ):
                    t = next_step[inst.id]
                    plan = inst.form_batch(t)
                    if plan.empty:
                        next_step[inst.id] = None
                        break
                    result = inst.execute_batch(plan, t)
                    bs_after = len(inst.queue) + len(inst.running)
                    buffer.append((t, inst.id, idx, inst, result, bs_after))
                    idx += 1
                    next_step[inst.id] = result.end_us
                    end_us = max(end_us, result.end_us)
            buffer.sort(key=lambda item: (item[0], item[1], item[2]))
            for t, _iid, _idx, inst, result, bs_after in buffer:
                self._apply_step(inst, result, t, bs_after)

        for i, record in enumerate(records):
            t = round(record.arrival_s * 1e6)
            drain(t)
            end_us = max(end_us, t)
            decision = self.route(record, t)
            if i == len(records) - 1:
                queued_last = sum(len(inst.queue) for inst in self.instances)
            chosen = decision.chosen
            inst = self.instances[chosen]
            if next_step[chosen] is None and inst.busy_until_us <= t:
                next_step[chosen] = t
        drain(None)
        return end_us, queued_last


def run(records: Sequence[TraceRecord], config: ClusterConfig) -> RunReport:
    """Simulate a full trace; pure function of (records, config)."""
    return ClusterSim(config).run_trace(records)


def probe_capacity(
    records: Sequence[TraceRecord],
    config: ClusterConfig,
    hi_start: float = 8.0,
    rate_cap: float = 4096.0,
    iterations: int = 8,
) -> float:
    """Binary-search the highest arrival rate the cluster sustains.

    A rate is sustainable when the total queued backlog at the moment of
    the last arrival stays under twice the cluster's peak batch capacity
    (n_instances * max_batch_requests). The probe resolves capacity to
    about (2 * peak batch capacity / len(records)) relative accuracy, so
    use a trace several times longer than the backlog threshold.
    """

    def sustainable(rate: float) -> bool:
        report = run(scale_trace(records, rate), config)
        limit = 2 * config.n_instances * config.cost_model.max_batch_requests
        return report.queued_at_last_arrival < limit

    lo = 0.0
    hi = hi_start
    while sustainable(hi):
        lo = hi
        if hi >= rate_cap:
            return rate_cap
        hi = min(hi * 2.0, rate_cap)
    for _ in range(iterations):
        mid = (lo + hi) / 2.0
        if sustainable(mid):
            lo = mid
        else:
            hi = mid
    return lo
