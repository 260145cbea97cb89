"""Single-instance serving engine: queueing, continuous batching with
chunked prefill, decode stepping, and the parametric step-cost model.

Timing model
------------
All simulation time is integer microseconds. A batch step costs

    prefill_base + prefill_per_token * allocated_prefill_tokens   (if any)
  + decode_base + decode_per_seq * n_decode
      + decode_per_ctx_token * sum(context tokens)                (if any)

with each of the two phase costs rounded to whole microseconds. The same
cost model drives both actual execution and the TTFT estimator, so a
well-tuned estimator is exact by construction.

State transitions commit when a batch is launched; the events it produces
(first token, token, finish) carry the step-end timestamp.
Router-observable indicator history is synchronized at step boundaries,
mirroring a scheduler that learns about instance state from responses.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, Sequence

from .hashing import chain_keys, combine64, stable_key

if TYPE_CHECKING:  # pragma: no cover
    from .kvcache import PrefixCache
    from .trace import TraceRecord

_OUTPUT_SALT = 0x0F_0C0DE


class DuplicateRequestError(Exception):
    """Request enqueued twice on the same instance."""


class InvariantError(Exception):
    """Internal accounting diverged (debug-mode reconciliation failed)."""


@dataclass(frozen=True)
class CostModel:
    """Affine step-cost model; the stand-in for a profiled instance."""

    prefill_base_ms: float = 5.0
    prefill_per_token_ms: float = 0.1
    decode_base_ms: float = 20.0
    decode_per_seq_ms: float = 1.0
    decode_per_ctx_token_ms: float = 0.0
    chunk_tokens: int = 2048
    max_batch_requests: int = 256

    def validate(self) -> None:
        for name in (
            "prefill_base_ms",
            "prefill_per_token_ms",
            "decode_base_ms",
            "decode_per_seq_ms",
            "decode_per_ctx_token_ms",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.chunk_tokens < 1 or self.max_batch_requests < 1:
            raise ValueError("chunk_tokens and max_batch_requests must be >= 1")

    def scaled(self, factor: float) -> "CostModel":
        """Copy with all time coefficients multiplied by ``factor``."""
        return replace(
            self,
            prefill_base_ms=self.prefill_base_ms * factor,
            prefill_per_token_ms=self.prefill_per_token_ms * factor,
            decode_base_ms=self.decode_base_ms * factor,
            decode_per_seq_ms=self.decode_per_seq_ms * factor,
            decode_per_ctx_token_ms=self.decode_per_ctx_token_ms * factor,
        )

    def prefill_cost_us(self, tokens: int) -> int:
        if tokens <= 0:
            return 0
        return round((self.prefill_base_ms + self.prefill_per_token_ms * tokens) * 1000.0)

    def decode_cost_us(self, n_seqs: int, ctx_tokens: int) -> int:
        if n_seqs <= 0:
            return 0
        return round(
            (
                self.decode_base_ms
                + self.decode_per_seq_ms * n_seqs
                + self.decode_per_ctx_token_ms * ctx_tokens
            )
            * 1000.0
        )

    def step_time_us(self, prefill_tokens: int, n_decode: int, ctx_tokens: int) -> int:
        return self.prefill_cost_us(prefill_tokens) + self.decode_cost_us(
            n_decode, ctx_tokens
        )


DEFAULT_COST_MODEL = CostModel()


@dataclass(frozen=True)
class EngineEvent:
    kind: str  # "first_token" | "token" | "finish"
    request_id: int
    time_us: int


class _Slot:
    """Per-request execution state while on an instance."""

    __slots__ = (
        "record",
        "keys",
        "hit_blocks",
        "hit_tokens",
        "pending",
        "generated",
        "enqueue_us",
        "first_sched_us",
    )

    def __init__(
        self,
        record: "TraceRecord",
        keys: list[int],
        hit_blocks: int,
        hit_tokens: int,
        pending: int,
        enqueue_us: int,
    ) -> None:
        self.record = record
        self.keys = keys
        self.hit_blocks = hit_blocks
        self.hit_tokens = hit_tokens
        self.pending = pending
        self.generated = 0
        self.enqueue_us = enqueue_us
        self.first_sched_us: int | None = None


@dataclass(frozen=True)
class AdmissionInfo:
    hit_blocks: int
    hit_tokens: int
    pending_prefill: int


@dataclass
class BatchPlan:
    now_us: int
    prefill: list[tuple[_Slot, int]]
    decode: list[_Slot]

    @property
    def empty(self) -> bool:
        return not self.prefill and not self.decode


@dataclass
class StepResult:
    events: list[EngineEvent]
    end_us: int
    duration_us: int
    prefill_us: int
    first_scheduled: list[int]  # request ids allocated prefill for the first time


def _plan_allocations(queue, chunk_budget: int, slots_left: int):
    """FIFO allocation of the prefill token budget; partial chunks allowed."""
    allocs = []
    for slot in queue:
        if chunk_budget <= 0 or slots_left <= 0:
            break
        take = min(chunk_budget, slot.pending)
        allocs.append((slot, take))
        chunk_budget -= take
        slots_left -= 1
    return allocs


class InstanceSim:
    """One PD-colocated serving instance driven by the cluster event loop.

    Requests live in ``queue`` until their prefill completes (emitting the
    first token), then in ``running`` until all output tokens are decoded.
    The prefix hit is computed once, at admission, against the instance
    cache; hit chains stay pinned until the request finishes, at which
    point its full prefix-plus-output chain is inserted.
    """

    def __init__(
        self,
        instance_id: int,
        cost_model: CostModel,
        cache: "PrefixCache",
        block_size: int = 16,
        debug: bool = False,
    ) -> None:
        cost_model.validate()
        self.id = instance_id
        self.cost_model = cost_model
        self.cache = cache
        self.block_size = block_size
        self.debug = debug

        self.queue: deque[_Slot] = deque()
        self.running: list[_Slot] = []
        self.busy_until_us = 0
        self.total_busy_us = 0
        self.prefill_busy_us = 0
        self._present: set[int] = set()

        # live aggregates (truth); see module docstring for view timing
        self._pending_sum = 0
        self._total_tokens = 0
        self._dc_tokens = 0

        # router-observable history: (time_us, (r, q, pending, total, dc))
        self.history: deque[tuple[int, tuple[int, int, int, int, int]]] = deque()
        self._view = (0, 0, 0, 0, 0)
        self._view_sync_due_us: int | None = None

    # -- aggregates --------------------------------------------------------

    def _live_view(self) -> tuple[int, int, int, int, int]:
        return (
            len(self.running),
            len(self.queue),
            self._pending_sum,
            self._total_tokens,
            self._dc_tokens,
        )

    def flush_view(self, now_us: int) -> None:
        """Publish the last step's effects once its end time has passed."""
        due = self._view_sync_due_us
        if due is not None and due <= now_us:
            self._view = self._live_view()
            self.history.append((due, self._view))
            self._view_sync_due_us = None

    def reconcile(self) -> None:
        """Debug check: recompute aggregates from slots and compare."""
        pending = sum(s.pending for s in self.queue)
        total = sum(s.record.input_tokens + s.generated for s in self.queue)
        total += sum(s.record.input_tokens + s.generated for s in self.running)
        dc = sum(s.record.input_tokens + s.generated for s in self.running)
        live = (len(self.running), len(self.queue), pending, total, dc)
        if live != self._live_view():
            raise InvariantError(
                f"instance {self.id}: aggregates {self._live_view()} != recount {live}"
            )

    # -- operations ----------------------------------------------------------

    def enqueue(
        self, record: "TraceRecord", now_us: int, keys: list[int] | None = None
    ) -> AdmissionInfo:
        """Admit a request FIFO; fix its prefix hit and pin the hit chains."""
        if record.request_id in self._present:
            raise DuplicateRequestError(f"request {record.request_id} already present")
        self.flush_view(now_us)
        if keys is None:
            keys = chain_keys(record.prefix_blocks)
        hit_blocks = self.cache.match_keys(keys)
        hit_tokens = min(hit_blocks * self.block_size, record.input_tokens)
        # a full hit still recomputes at least the final input position
        pending = max(record.input_tokens - hit_tokens, 1)
        self.cache.touch_keys(keys, hit_blocks, now_us)
        self.cache.pin_keys(keys, hit_blocks)

        slot = _Slot(record, keys, hit_blocks, hit_tokens, pending, now_us)
        self.queue.append(slot)
        self._present.add(record.request_id)
        self._pending_sum += pending
        self._total_tokens += record.input_tokens

        r, q, p, t, d = self._view
        self._view = (r, q + 1, p + pending, t + record.input_tokens, d)
        self.history.append((now_us, self._view))
        if self.debug:
            self.reconcile()
        return AdmissionInfo(hit_blocks, hit_tokens, pending)

    def form_batch(self, now_us: int) -> BatchPlan:
        """Plan the next step: all running decodes plus FIFO prefill chunks."""
        self.flush_view(now_us)
        cm = self.cost_model
        decode = self.running[: cm.max_batch_requests]
        budget = max(cm.chunk_tokens - len(decode), 0)
        slots_left = cm.max_batch_requests - len(decode)
        prefill = _plan_allocations(self.queue, budget, slots_left)
        return BatchPlan(now_us=now_us, prefill=prefill, decode=decode)

    def execute_batch(self, plan: BatchPlan, now_us: int) -> StepResult:
        """Run one step; returns its events (timestamped at step end)."""
        if plan.empty:
            return StepResult([], now_us, 0, 0, [])
        cm = self.cost_model
        prefill_tokens = sum(take for _, take in plan.prefill)
        ctx_tokens = sum(s.record.input_tokens + s.generated for s in plan.decode)
        prefill_us = cm.prefill_cost_us(prefill_tokens)
        duration = prefill_us + cm.decode_cost_us(len(plan.decode), ctx_tokens)
        end_us = now_us + duration

        events: list[EngineEvent] = []
        first_scheduled: list[int] = []
        for slot, take in plan.prefill:
            if slot.first_sched_us is None:
                slot.first_sched_us = now_us
                first_scheduled.append(slot.record.request_id)
            slot.pending -= take
            self._pending_sum -= take

        while self.queue and self.queue[0].pending == 0:
            slot = self.queue.popleft()
            slot.generated = 1
            self._total_tokens += 1
            events.append(EngineEvent("first_token", slot.record.request_id, end_us))
            if slot.record.output_tokens == 1:
                events.append(EngineEvent("finish", slot.record.request_id, end_us))
                self._finish(slot, end_us)
            else:
                self.running.append(slot)
                self._dc_tokens += slot.record.input_tokens + 1

        finished: list[_Slot] = []
        for slot in plan.decode:
            slot.generated += 1
            self._total_tokens += 1
            self._dc_tokens += 1
            events.append(EngineEvent("token", slot.record.request_id, end_us))
            if slot.generated == slot.record.output_tokens:
                events.append(EngineEvent("finish", slot.record.request_id, end_us))
                finished.append(slot)
        if finished:
            gone = set(map(id, finished))
            self.running = [s for s in self.running if id(s) not in gone]
            for slot in finished:
                self._dc_tokens -= slot.record.input_tokens + slot.generated
                self._finish(slot, end_us)

        self.busy_until_us = end_us
        self.total_busy_us += duration
        self.prefill_busy_us += prefill_us
        self._view_sync_due_us = end_us
        if self.debug:
            self.reconcile()
        return StepResult(events, end_us, duration, prefill_us, first_scheduled)

    def _finish(self, slot: _Slot, end_us: int) -> None:
        self._total_tokens -= slot.record.input_tokens + slot.generated
        self._present.discard(slot.record.request_id)
        self.cache.unpin_keys(slot.keys, slot.hit_blocks)
        self.cache.insert_keys(self._full_chain_keys(slot), end_us)

    def _full_chain_keys(self, slot: _Slot) -> list[int]:
        """Prefix chain extended with this request's output blocks."""
        n_out_blocks = -(-slot.record.output_tokens // self.block_size)
        keys = list(slot.keys)
        acc = keys[-1]
        rid = slot.record.request_id
        for idx in range(n_out_blocks):
            acc = combine64(acc, stable_key(_OUTPUT_SALT, rid, idx))
            keys.append(acc)
        return keys

    # -- estimator support -----------------------------------------------------

    def sched_clone(self) -> "ReplayState":
        return ReplayState(
            busy_until_us=self.busy_until_us,
            queue=[
                _ReplayPrefill(s.pending, s.record.input_tokens, s.record.output_tokens)
                for s in self.queue
            ],
            running=[
                _ReplayDecode(
                    s.record.output_tokens - s.generated,
                    s.record.input_tokens + s.generated,
                )
                for s in self.running
            ],
        )


class _ReplayPrefill:
    __slots__ = ("pending", "input_tokens", "output_tokens")

    def __init__(self, pending: int, input_tokens: int, output_tokens: int) -> None:
        self.pending = pending
        self.input_tokens = input_tokens
        self.output_tokens = output_tokens


class _ReplayDecode:
    __slots__ = ("remaining", "ctx_tokens")

    def __init__(self, remaining: int, ctx_tokens: int) -> None:
        self.remaining = remaining
        self.ctx_tokens = ctx_tokens


@dataclass
class ReplayState:
    busy_until_us: int
    queue: list[_ReplayPrefill]
    running: list[_ReplayDecode]


_REPLAY_STEP_CAP = 10_000_000


def estimate_first_token_us(
    state: ReplayState,
    candidate_pending: int,
    cost_model: CostModel,
    now_us: int,
) -> int:
    """Absolute time of the candidate's first token if enqueued now.

    Replays the instance's queued and running work forward with the same
    batch-formation rules as execution, the candidate appended FIFO-last.
    Future arrivals are not modeled.
    """
    cm = cost_model
    t = max(now_us, state.busy_until_us)
    queue = list(state.queue)
    running = list(state.running)
    candidate = _ReplayPrefill(max(candidate_pending, 1), 0, 1)
    queue.append(candidate)
    for _ in range(_REPLAY_STEP_CAP):
        decode = running[: cm.max_batch_requests]
        budget = max(cm.chunk_tokens - len(decode), 0)
        slots_left = cm.max_batch_requests - len(decode)
        allocs = _plan_allocations(queue, budget, slots_left)
        prefill_tokens = sum(take for _, take in allocs)
        ctx_tokens = sum(d.ctx_tokens for d in decode)
        duration = cm.step_time_us(prefill_tokens, len(decode), ctx_tokens)
        end = t + duration
        for slot, take in allocs:
            slot.pending -= take
        while queue and queue[0].pending == 0:
            slot = queue.pop(0)
            if slot is candidate:
                return end
            if slot.output_tokens > 1:
                running.append(_ReplayDecode(slot.output_tokens - 1, slot.input_tokens + 1))
        for d in decode:
            d.remaining -= 1
            d.ctx_tokens += 1
        running = [d for d in running if d.remaining > 0]
        t = end
    raise RuntimeError("TTFT replay did not converge")
