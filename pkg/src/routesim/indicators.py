"""Per-instance indicator snapshots and request-conditioned indicators.

Every policy scores instances from the same small set of observables:
running/queued batch sizes, pending prefill tokens, total and decode
context tokens, the request's prospective KV hit ratio, and the combined
prefill-token figure ``p_tokens`` (instance backlog plus the request's
post-hit new tokens).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

from .hashing import chain_keys

if TYPE_CHECKING:  # pragma: no cover
    from .engine import InstanceSim
    from .trace import TraceRecord


@dataclass(frozen=True)
class IndicatorSnapshot:
    r_bs: int
    q_bs: int
    bs: int
    pending_prefill_tokens: int
    total_tokens: int
    dc_tokens: int
    as_of_us: int


ZERO_FIELDS = (0, 0, 0, 0, 0)


def snapshot(
    instance: "InstanceSim", now_us: int, staleness_us: int = 0
) -> IndicatorSnapshot:
    """Instance indicators as of ``now - staleness``.

    With staleness, recently admitted requests and just-finished steps are
    invisible, mimicking a router that learns from delayed responses.
    """
    instance.flush_view(now_us)
    cutoff = now_us - staleness_us
    history = instance.history
    # drop entries that can never be queried again (cutoffs are monotone)
    while len(history) >= 2 and history[1][0] <= cutoff:
        history.popleft()
    values = ZERO_FIELDS
    as_of = 0
    for t, view in reversed(history):
        if t <= cutoff:
            values, as_of = view, t
            break
    r, q, pending, total, dc = values
    return IndicatorSnapshot(
        r_bs=r,
        q_bs=q,
        bs=r + q,
        pending_prefill_tokens=pending,
        total_tokens=total,
        dc_tokens=dc,
        as_of_us=as_of,
    )


def hit_tokens(
    instance: "InstanceSim", record: "TraceRecord", keys: list[int] | None = None
) -> int:
    """Input tokens the instance cache would skip. Pure read."""
    if keys is None:
        keys = chain_keys(record.prefix_blocks)
    blocks = instance.cache.match_keys(keys)
    return min(blocks * instance.block_size, record.input_tokens)


def kv_hit_ratio(
    instance: "InstanceSim", record: "TraceRecord", keys: list[int] | None = None
) -> float:
    return hit_tokens(instance, record, keys) / record.input_tokens


def new_prefill_tokens(
    instance: "InstanceSim", record: "TraceRecord", keys: list[int] | None = None
) -> int:
    """Prefill tokens this instance would still compute; at least 1."""
    return max(record.input_tokens - hit_tokens(instance, record, keys), 1)


def p_tokens(
    instance: "InstanceSim",
    record: "TraceRecord",
    snap: IndicatorSnapshot | None = None,
    keys: list[int] | None = None,
    now_us: int = 0,
) -> int:
    """Instance prefill backlog plus the request's new prefill tokens."""
    if snap is None:
        snap = snapshot(instance, now_us)
    return snap.pending_prefill_tokens + new_prefill_tokens(instance, record, keys)
