"""Prefix-hotspot detection and mitigation.

A *class* is a group of requests sharing the same leading prefix blocks
(think: one system prompt or one conversation head). Product-score routing
can break down when a single class floods the few instances that hold its
prefix, so the detector watches per-class workload shares over a sliding
window and raises a two-phase alarm:

* phase 1 (workload condition): the class's share of arrivals, odds-form
  ``fraction/(1-fraction)``, exceeds ``holders/others`` where *holders*
  are the instances whose cache currently contains the class prefix. Below
  that bound the expected batch size of holder instances cannot exceed the
  rest, so routing into holders is always safe.
* phase 2 (confirmation): while phase 1 is suspect, more than
  ``consecutive_multiplier * len(holders)`` consecutive class requests were
  routed into the holder set with a product score no larger than the best
  non-holder's, i.e. the growing batch size is failing to push the class
  off the holders.

While a class is in phase-2 alarm, its requests either have the holder set
excluded from routing or are forced onto the least-loaded instance,
depending on the configured mitigation. The alarm clears after the class
has stayed phase-1 benign for one full window (cooldown).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

from .hashing import chain_keys, stable_key

if TYPE_CHECKING:  # pragma: no cover
    from .kvcache import PrefixCache
    from .policies import Candidate, RoutingDecision

_CLASS_SALT = 0xC1A5_5000


def class_key(prefix_blocks: Sequence[int], key_blocks: int = 2) -> int:
    """64-bit class identity from the leading ``key_blocks`` block hashes."""
    if not prefix_blocks:
        raise ValueError("class_key needs at least one block")
    return stable_key(_CLASS_SALT, *prefix_blocks[:key_blocks])


def estimate_bs_ratio(
    hot_fraction: float,
    qps: float,
    holders: int,
    non_holders: int,
    base_bs: float,
    elapsed_s: float,
) -> float:
    """Expected batch-size ratio of holder instances vs the rest.

    Starting from a balanced batch size ``base_bs``, a class receiving
    ``hot_fraction`` of ``qps`` concentrated on ``holders`` instances for
    ``elapsed_s`` seconds drives the ratio

        (base_bs + hot_fraction*qps/holders * t)
        / (base_bs + (1-hot_fraction)*qps/non_holders * t)
    """
    if holders < 1 or non_holders < 1:
        raise ValueError("holders and non_holders must be >= 1")
    if not 0.0 <= hot_fraction <= 1.0:
        raise ValueError("hot_fraction must be in [0, 1]")
    if elapsed_s < 0:
        raise ValueError("elapsed_s must be >= 0")
    if elapsed_s == 0 or qps == 0:
        return 1.0
    numer = base_bs + hot_fraction * qps / holders * elapsed_s
    denom = base_bs + (1.0 - hot_fraction) * qps / non_holders * elapsed_s
    if denom == 0.0:
        return 1.0 if numer == 0.0 else float("inf")
    return numer / denom


def phase1_suspect(hot_fraction: float, n_holders: int, n_others: int) -> bool:
    """Workload condition: True when the class could overload its holders.

    Benign iff fraction/(1-fraction) <= holders/others. A class taking all
    arrivals, or one with no non-holder instances left, is treated as
    suspect since it dominates the cluster by definition. A class with no
    holders at all exerts no cache pull and cannot form a hotspot.
    """
    if hot_fraction <= 0.0 or n_holders == 0:
        return False
    remainder = 1.0 - hot_fraction
    if remainder <= 0.0 or n_others == 0:
        return True
    return hot_fraction / remainder > n_holders / n_others


@dataclass(frozen=True)
class DetectorConfig:
    window_s: float = 60.0
    top_k_classes: int = 8
    class_key_blocks: int = 2
    consecutive_multiplier: float = 2.0
    mitigation: str = "exclude_holders"  # or "force_least_bs"
    compare_mean_non_holder: bool = False

    def validate(self) -> None:
        if self.window_s <= 0:
            raise ValueError("window_s must be positive")
        if self.top_k_classes < 1 or self.class_key_blocks < 1:
            raise ValueError("top_k_classes and class_key_blocks must be >= 1")
        if self.mitigation not in ("exclude_holders", "force_least_bs"):
            raise ValueError(f"unknown mitigation {self.mitigation!r}")


@dataclass(frozen=True)
class DetectorVerdict:
    excluded: frozenset[int] = frozenset()
    force_least_bs: bool = False

    @property
    def empty(self) -> bool:
        return not self.excluded and not self.force_least_bs


EMPTY_VERDICT = DetectorVerdict()


@dataclass(frozen=True)
class ClassWindowStats:
    """Point-in-time view of one tracked class, mostly for tests/export."""

    class_key: int
    arrivals_in_window: int
    fraction: float
    holders: frozenset[int]
    non_holders: frozenset[int]
    streak: int
    phase: int  # 0 none, 1 suspect, 2 alarmed


@dataclass(frozen=True)
class DetectorRow:
    window_start_s: float
    class_key: int
    fraction: float
    n_holders: int
    n_others: int
    suspect: bool
    phase: int


@dataclass
class _Track:
    exemplar_keys: list[int]
    buckets: deque = field(default_factory=deque)  # [sec, count, hit_tokens]
    window_count: int = 0
    window_hit_tokens: int = 0
    streak: int = 0
    suspect_now: bool = False
    alarmed: bool = False
    last_suspect_us: int = -1
    first_suspect_us: int | None = None


class Detector:
    """Sliding-window class tracker updated on every routing decision."""

    def __init__(self, cfg: DetectorConfig, caches: Sequence["PrefixCache"]) -> None:
        cfg.validate()
        self.cfg = cfg
        self.caches = caches
        self.n_instances = len(caches)
        self._tracks: dict[int, _Track] = {}
        self._totals: deque = deque()  # [sec, count]
        self._total_count = 0
        self._rows: list[DetectorRow] = []
        self._window_idx: int | None = None
        self.first_violation_us: int | None = None

    # -- window bookkeeping ------------------------------------------------

    def _expire(self, now_us: int) -> None:
        horizon = now_us // 1_000_000 - int(self.cfg.window_s)
        while self._totals and self._totals[0][0] <= horizon:
            self._total_count -= self._totals.popleft()[1]
        for track in self._tracks.values():
            while track.buckets and track.buckets[0][0] <= horizon:
                _, cnt, hits = track.buckets.popleft()
                track.window_count -= cnt
                track.window_hit_tokens -= hits

    def _bump(self, track: _Track, now_us: int, hit_tokens: int) -> None:
        sec = now_us // 1_000_000
        if self._totals and self._totals[-1][0] == sec:
            self._totals[-1][1] += 1
        else:
            self._totals.append([sec, 1])
        self._total_count += 1
        if track.buckets and track.buckets[-1][0] == sec:
            track.buckets[-1][1] += 1
            track.buckets[-1][2] += hit_tokens
        else:
            track.buckets.append([sec, 1, hit_tokens])
        track.window_count += 1
        track.window_hit_tokens += hit_tokens

    def _top_keys(self) -> set[int]:
        tracks = self._tracks
        if len(tracks) <= self.cfg.top_k_classes:
            return set(tracks)
        ranked = sorted(
            tracks.items(),
            key=lambda kv: (-kv[1].window_hit_tokens, -kv[1].window_count, kv[0]),
        )
        return {k for k, _ in ranked[: self.cfg.top_k_classes]}

    def holders(self, track: _Track) -> frozenset[int]:
        keys = track.exemplar_keys
        want = len(keys)
        return frozenset(
            i for i, cache in enumerate(self.caches) if cache.match_keys(keys) == want
        )

    # -- the two phases ------------------------------------------------------

    def _evaluate_phase1(self, track: _Track, now_us: int) -> tuple[bool, frozenset[int]]:
        held = self.holders(track)
        fraction = (
            track.window_count / self._total_count if self._total_count else 0.0
        )
        suspect = phase1_suspect(fraction, len(held), self.n_instances - len(held))
        track.suspect_now = suspect
        if suspect:
            track.last_suspect_us = now_us
            if track.first_suspect_us is None:
                track.first_suspect_us = now_us
            if self.first_violation_us is None:
                self.first_violation_us = now_us
        else:
            track.streak = 0
        if track.alarmed and not suspect:
            # cooldown: clear once benign has held for a full window
            if now_us - track.last_suspect_us >= int(self.cfg.window_s * 1e6):
                track.alarmed = False
                track.streak = 0
        return suspect, held

    def _evaluate_phase2(
        self,
        track: _Track,
        held: frozenset[int],
        decision: "RoutingDecision",
        products: Sequence[float],
        now_us: int,
    ) -> None:
        non_holders = [
            i
            for i in range(self.n_instances)
            if i not in held and i not in decision.filtered
        ]
        qualifying = False
        if decision.chosen in held and non_holders:
            others = [products[i] for i in non_holders]
            reference = (
                sum(others) / len(others)
                if self.cfg.compare_mean_non_holder
                else min(others)
            )
            qualifying = products[decision.chosen] <= reference
        track.streak = track.streak + 1 if qualifying else 0
        if track.streak > self.cfg.consecutive_multiplier * len(held):
            track.alarmed = True
            track.last_suspect_us = now_us

    # -- public hooks --------------------------------------------------------

    def track_key(self, record) -> int:
        return class_key(record.prefix_blocks, self.cfg.class_key_blocks)

    def verdict(self, record, now_us: int) -> DetectorVerdict:
        """Mitigation to apply to this request, before scoring."""
        track = self._tracks.get(self.track_key(record))
        if track is None or not track.alarmed:
            return EMPTY_VERDICT
        if self.cfg.mitigation == "force_least_bs":
            return DetectorVerdict(force_least_bs=True)
        return DetectorVerdict(excluded=self.holders(track))

    def observe(
        self,
        record,
        decision: "RoutingDecision",
        candidates: Sequence["Candidate"],
        now_us: int,
    ) -> None:
        """Account one routed request and advance the alarm state machine."""
        self._roll_window(now_us)
        self._expire(now_us)
        key = self.track_key(record)
        track = self._tracks.get(key)
        if track is None:
            k = self.cfg.class_key_blocks
            track = _Track(exemplar_keys=chain_keys(record.prefix_blocks[:k]))
            self._tracks[key] = track
        chosen = next(c for c in candidates if c.instance_id == decision.chosen)
        self._bump(track, now_us, chosen.hit_tokens)

        # only classes actually enjoying cache hits are hotspot candidates
        if track.window_hit_tokens > 0 and key in self._top_keys():
            suspect, held = self._evaluate_phase1(track, now_us)
            if suspect:
                products = [0.0] * self.n_instances
                for c in candidates:
                    products[c.instance_id] = float(c.p_tokens) * max(
                        c.snapshot.bs, 1
                    )
                self._evaluate_phase2(track, held, decision, products, now_us)
        # alarmed classes decay toward benign even without own arrivals
        for other in self._tracks.values():
            if other is not track and other.alarmed:
                self._evaluate_phase1(other, now_us)

    # -- export ----------------------------------------------------------------

    def stats_for(self, key: int, now_us: int) -> ClassWindowStats | None:
        track = self._tracks.get(key)
        if track is None:
            return None
        self._expire(now_us)
        held = self.holders(track)
        fraction = (
            track.window_count / self._total_count if self._total_count else 0.0
        )
        phase = 2 if track.alarmed else (1 if track.suspect_now else 0)
        return ClassWindowStats(
            class_key=key,
            arrivals_in_window=track.window_count,
            fraction=fraction,
            holders=held,
            non_holders=frozenset(range(self.n_instances)) - held,
            streak=track.streak,
            phase=phase,
        )

    def _roll_window(self, now_us: int) -> None:
        idx = int(now_us / 1e6 // self.cfg.window_s)
        if self._window_idx is None:
            self._window_idx = idx
            return
        if idx > self._window_idx:
            self._emit_rows(self._window_idx)
            self._window_idx = idx

    def _emit_rows(self, window_idx: int) -> None:
        start = window_idx * self.cfg.window_s
        for key in sorted(self._top_keys()):
            track = self._tracks[key]
            held = self.holders(track)
            fraction = (
                track.window_count / self._total_count if self._total_count else 0.0
            )
            self._rows.append(
                DetectorRow(
                    window_start_s=start,
                    class_key=key,
                    fraction=fraction,
                    n_holders=len(held),
                    n_others=self.n_instances - len(held),
                    suspect=track.suspect_now,
                    phase=2 if track.alarmed else (1 if track.suspect_now else 0),
                )
            )

    def finalize(self, end_us: int) -> list[DetectorRow]:
        if self._window_idx is not None and self._tracks:
            self._emit_rows(self._window_idx)
            self._window_idx = None
        return self._rows
