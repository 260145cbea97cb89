"""Routing policies: score candidate instances, pick the best one.

Five score families are supported behind one ``Policy.choose`` interface:

* ``vllm``            weighted sum of queued and running batch size
* ``linear``          weighted sum of (1 - hit ratio) and normalized bs
* ``filter``          load-range gate, then most cache hits
* ``simulate``        lowest estimated TTFT via cost-model replay
* ``multiplicative``  p_tokens * bs product, no weights to tune
* ``least_bs``        plain join-shortest-queue on total batch size

All scores are pure functions of their inputs; lower is better. Ties are
broken by a seeded rotation so symmetric startup load spreads evenly
instead of piling onto the lowest instance id.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

from . import engine
from .indicators import IndicatorSnapshot

if TYPE_CHECKING:  # pragma: no cover
    from .detector import DetectorVerdict
    from .engine import CostModel, InstanceSim
    from .trace import TraceRecord

POLICY_KINDS = ("vllm", "linear", "filter", "simulate", "multiplicative", "least_bs")


class NoInstancesError(Exception):
    """choose() called with an empty candidate set."""


@dataclass(frozen=True)
class PolicyConfig:
    kind: str = "multiplicative"
    # vllm
    q_weight: float = 1.0
    # linear
    kv_weight: float = 0.4
    bs_norm_cap: int | None = None  # fixed normalizer instead of per-decision max
    # filter
    range_threshold: int = 4
    # simulate
    mis_tuned: bool = False
    mis_tuned_factor: float = 4.0
    # multiplicative
    kv_indicator: str = "p_tokens"  # or "one_minus_hit"
    balance_indicator: str = "bs"  # or "total_tokens"
    tie_break_seed: int = 0

    def validate(self) -> None:
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if not 0.0 <= self.kv_weight <= 1.0:
            raise ValueError("kv_weight must be in [0, 1]")
        if self.range_threshold < 1:
            raise ValueError("range_threshold must be >= 1")
        if self.q_weight < 0:
            raise ValueError("q_weight must be non-negative")
        if self.kv_indicator not in ("p_tokens", "one_minus_hit"):
            raise ValueError(f"unknown kv_indicator {self.kv_indicator!r}")
        if self.balance_indicator not in ("bs", "total_tokens"):
            raise ValueError(f"unknown balance_indicator {self.balance_indicator!r}")


@dataclass(frozen=True)
class Candidate:
    """Everything a policy may look at for one (instance, request) pair."""

    instance_id: int
    snapshot: IndicatorSnapshot
    hit_ratio: float
    hit_tokens: int
    new_prefill_tokens: int
    p_tokens: int
    instance: "InstanceSim | None" = None  # needed only by the simulate policy


@dataclass(frozen=True)
class RoutingDecision:
    chosen: int
    scores: dict[int, float]
    filtered: frozenset[int]
    kind: str
    time_us: int


class TieBreaker:
    """Deterministic rotation over tied candidates."""

    def __init__(self, seed: int = 0) -> None:
        self._counter = seed

    def pick(self, tied: Sequence[int]) -> int:
        choice = tied[self._counter % len(tied)]
        self._counter += 1
        return choice


def score_vllm(snap: IndicatorSnapshot, q_weight: float = 1.0) -> float:
    """q_weight * queued + running; batch-size-only load balancing."""
    return q_weight * snap.q_bs + snap.r_bs


def score_linear(
    snap: IndicatorSnapshot, hit_ratio: float, kv_weight: float, bs_norm: float
) -> float:
    """kv_weight * (1 - hit) + (1 - kv_weight) * min(bs / bs_norm, 1)."""
    load = min(snap.bs / bs_norm, 1.0)
    return kv_weight * (1.0 - hit_ratio) + (1.0 - kv_weight) * load


def multiplicative_score(p_tokens: float, bs: float) -> float:
    """Product of the prefill-token and batch-size indicators.

    The max(bs, 1) floor keeps an idle instance from collapsing the
    product to zero, which would hide hit differences among idle
    instances. Positive rescaling of either factor stream never changes
    which instance attains the minimum.
    """
    return p_tokens * max(bs, 1)


def score_multiplicative(
    cand: Candidate, kv_indicator: str = "p_tokens", balance_indicator: str = "bs"
) -> float:
    kv = (
        float(cand.p_tokens)
        if kv_indicator == "p_tokens"
        else 1.0 - cand.hit_ratio
    )
    balance = (
        cand.snapshot.bs if balance_indicator == "bs" else cand.snapshot.total_tokens
    )
    return multiplicative_score(kv, balance)


def estimate_ttft_us(
    cand: Candidate, record: "TraceRecord", cost_model: "CostModel", now_us: int
) -> int:
    """Estimated time to first token if routed here, in microseconds.

    Replays the instance's remaining busy time plus a chunked-prefill
    replay of its queue with this request appended, all under the given
    cost model (which may deliberately differ from the engine's).
    """
    if cand.instance is None:
        raise ValueError("simulate policy needs candidates built with instances")
    state = cand.instance.sched_clone()
    first = engine.estimate_first_token_us(
        state, cand.new_prefill_tokens, cost_model, now_us
    )
    return first - now_us


def _argmin(scores: dict[int, float], tiebreak: TieBreaker) -> int:
    best = min(scores.values())
    tied = [i for i, s in scores.items() if s == best]
    if len(tied) == 1:
        return tied[0]
    return tiebreak.pick(tied)


def route_filter(
    candidates: Sequence[Candidate],
    range_threshold: int,
    tiebreak: TieBreaker,
    now_us: int,
    filtered: frozenset[int] = frozenset(),
) -> RoutingDecision:
    """Two-stage rule: rebalance when the bs range is blown, else max hits.

    When max(bs) - min(bs) exceeds the threshold the request goes to the
    least-loaded instance regardless of cache state; otherwise to the
    instance with the highest prospective hit ratio.
    """
    bs_values = [c.snapshot.bs for c in candidates]
    if max(bs_values) - min(bs_values) > range_threshold:
        scores = {c.instance_id: float(c.snapshot.bs) for c in candidates}
    else:
        scores = {c.instance_id: 1.0 - c.hit_ratio for c in candidates}
    return RoutingDecision(
        chosen=_argmin(scores, tiebreak),
        scores=scores,
        filtered=filtered,
        kind="filter",
        time_us=now_us,
    )


class Policy:
    """Configured policy instance with tie-break state."""

    def __init__(
        self,
        cfg: PolicyConfig,
        base_cost_model: "CostModel",
        tie_seed: int | None = None,
    ) -> None:
        cfg.validate()
        self.cfg = cfg
        self.tiebreak = TieBreaker(cfg.tie_break_seed if tie_seed is None else tie_seed)
        self.sim_cost_model = (
            base_cost_model.scaled(cfg.mis_tuned_factor)
            if cfg.mis_tuned
            else base_cost_model
        )

    def choose(
        self,
        candidates: Sequence[Candidate],
        record: "TraceRecord",
        now_us: int,
        verdict: "DetectorVerdict | None" = None,
    ) -> RoutingDecision:
        """Pick the best-scoring unfiltered instance.

        Detector exclusions are dropped entirely if they would empty the
        candidate set (fail open).
        """
        if not candidates:
            raise NoInstancesError("no instances to route to")
        excluded: frozenset[int] = frozenset()
        kind = self.cfg.kind
        if verdict is not None:
            if verdict.force_least_bs:
                kind = "least_bs"
            elif verdict.excluded:
                keep = [c for c in candidates if c.instance_id not in verdict.excluded]
                if keep:
                    excluded = verdict.excluded
                    candidates = keep

        if kind == "filter":
            return route_filter(
                candidates, self.cfg.range_threshold, self.tiebreak, now_us, excluded
            )

        if kind == "vllm":
            scores = {
                c.instance_id: score_vllm(c.snapshot, self.cfg.q_weight)
                for c in candidates
            }
        elif kind == "least_bs":
            scores = {c.instance_id: float(c.snapshot.bs) for c in candidates}
        elif kind == "linear":
            bs_norm = float(
                self.cfg.bs_norm_cap
                if self.cfg.bs_norm_cap is not None
                else max(max(c.snapshot.bs for c in candidates), 1)
            )
            scores = {
                c.instance_id: score_linear(
                    c.snapshot, c.hit_ratio, self.cfg.kv_weight, bs_norm
                )
                for c in candidates
            }
        elif kind == "simulate":
            scores = {
                c.instance_id: float(
                    estimate_ttft_us(c, record, self.sim_cost_model, now_us)
                )
                for c in candidates
            }
        elif kind == "multiplicative":
            scores = {
                c.instance_id: score_multiplicative(
                    c, self.cfg.kv_indicator, self.cfg.balance_indicator
                )
                for c in candidates
            }
        else:  # pragma: no cover - guarded by validate()
            raise ValueError(f"unhandled policy kind {kind!r}")

        return RoutingDecision(
            chosen=_argmin(scores, self.tiebreak),
            scores=scores,
            filtered=excluded,
            kind=kind,
            time_us=now_us,
        )
