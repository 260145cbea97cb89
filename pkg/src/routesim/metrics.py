"""Measurement collection and export.

The collector is fed by the cluster event loop; everything else here is a
read-only pass over the finished ``RunReport``. Exports are plain CSVs plus
a ``summary.json`` and are byte-stable for identical runs:

* ``requests.csv``     one row per request (TTFT/TPOT in ms)
* ``cdf_ttft.csv``     sorted value, cumulative fraction
* ``cdf_tpot.csv``     same for TPOT (single-token outputs excluded)
* ``hit_timeline.csv`` token-weighted KV hit ratio per time window
* ``imbalance.csv``    per-window per-instance prefill seconds and mean bs
* ``detector.csv``     per-window per-class detector state (when enabled)
* ``summary.json``     counts, means, and P50/P95/P99
"""

from __future__ import annotations

import csv
import json
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .detector import DetectorRow
from .engine import EngineEvent


@dataclass
class RequestMetrics:
    request_id: int
    class_key: int
    arrival_us: int
    chosen_instance: int
    input_tokens: int
    output_tokens: int
    hit_tokens: int
    first_sched_us: int | None = None
    first_token_us: int | None = None
    finish_us: int | None = None

    @property
    def hit_ratio(self) -> float:
        return self.hit_tokens / self.input_tokens

    @property
    def ttft_us(self) -> int | None:
        if self.first_token_us is None:
            return None
        return self.first_token_us - self.arrival_us

    @property
    def tpot_us(self) -> float | None:
        """Mean gap between output tokens; undefined for single-token outputs."""
        if self.finish_us is None or self.first_token_us is None:
            return None
        if self.output_tokens < 2:
            return None
        return (self.finish_us - self.first_token_us) / (self.output_tokens - 1)

    @property
    def queue_delay_us(self) -> int | None:
        if self.first_sched_us is None:
            return None
        return self.first_sched_us - self.arrival_us


@dataclass(frozen=True)
class StepRecord:
    instance: int
    start_us: int
    end_us: int
    prefill_us: int


@dataclass
class RunReport:
    policy_kind: str
    seed: int
    n_instances: int
    block_size: int
    requests: list[RequestMetrics] = field(default_factory=list)
    steps: list[StepRecord] = field(default_factory=list)
    bs_series: dict[int, list[tuple[int, int]]] = field(default_factory=dict)
    detector_rows: list[DetectorRow] = field(default_factory=list)
    detector_enabled: bool = False
    routed: int = 0
    finished: int = 0
    queued_at_last_arrival: int = 0
    end_us: int = 0
    arrivals_hash: str = ""
    first_violation_us: int | None = None

    def ttft_series_us(self) -> list[int]:
        return [r.ttft_us for r in self.requests if r.ttft_us is not None]

    def tpot_series_us(self) -> list[float]:
        return [r.tpot_us for r in self.requests if r.tpot_us is not None]

    def cluster_hit_ratio(self, request_weighted: bool = False) -> float | None:
        if not self.requests:
            return None
        if request_weighted:
            return sum(r.hit_ratio for r in self.requests) / len(self.requests)
        total_in = sum(r.input_tokens for r in self.requests)
        return sum(r.hit_tokens for r in self.requests) / total_in


class Collector:
    """Append-only sink for engine and routing events."""

    def __init__(self, policy_kind: str, seed: int, n_instances: int, block_size: int):
        self.report = RunReport(policy_kind, seed, n_instances, block_size)
        self.report.bs_series = {i: [] for i in range(n_instances)}
        self._by_id: dict[int, RequestMetrics] = {}

    def on_route(self, entry: RequestMetrics) -> None:
        self.report.requests.append(entry)
        self._by_id[entry.request_id] = entry
        self.report.routed += 1

    def record_bs(self, instance: int, t_us: int, bs: int) -> None:
        self.report.bs_series[instance].append((t_us, bs))

    def on_step(
        self, instance: int, start_us: int, end_us: int, prefill_us: int,
        first_scheduled: Sequence[int],
    ) -> None:
        self.report.steps.append(StepRecord(instance, start_us, end_us, prefill_us))
        for rid in first_scheduled:
            self._by_id[rid].first_sched_us = start_us

    def on_event(self, event: EngineEvent) -> None:
        entry = self._by_id[event.request_id]
        if event.kind == "first_token":
            entry.first_token_us = event.time_us
        elif event.kind == "finish":
            entry.finish_us = event.time_us
            self.report.finished += 1

    def finalize(
        self,
        end_us: int,
        arrivals_hash: str,
        queued_at_last_arrival: int,
        detector_rows: list[DetectorRow] | None = None,
        first_violation_us: int | None = None,
    ) -> RunReport:
        self.report.end_us = end_us
        self.report.arrivals_hash = arrivals_hash
        self.report.queued_at_last_arrival = queued_at_last_arrival
        if detector_rows is not None:
            self.report.detector_enabled = True
            self.report.detector_rows = detector_rows
            self.report.first_violation_us = first_violation_us
        return self.report


# -- scalar statistics -----------------------------------------------------

def percentile(series: Sequence[float], p: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th order statistic."""
    if not series:
        raise ValueError("percentile of an empty series")
    if not 0.0 <= p <= 100.0:
        raise ValueError("p must be in [0, 100]")
    data = sorted(series)
    rank = max(math.ceil(p / 100.0 * len(data)), 1)
    return data[rank - 1]


def mean_bs_by_instance(report: RunReport) -> dict[int, float]:
    """Time-weighted mean batch size per instance over the whole run."""
    out: dict[int, float] = {}
    horizon = report.end_us
    for inst, series in report.bs_series.items():
        if horizon <= 0:
            out[inst] = 0.0
            continue
        area = 0
        prev_t, prev_bs = 0, 0
        for t, bs in series:
            area += prev_bs * (t - prev_t)
            prev_t, prev_bs = t, bs
        area += prev_bs * (horizon - prev_t)
        out[inst] = area / horizon
    return out


def bs_spread(report: RunReport) -> float | None:
    """max/min of per-instance mean batch size; None when undefined."""
    means = list(mean_bs_by_instance(report).values())
    if not means:
        return None
    hi, lo = max(means), min(means)
    if hi == 0.0:
        return 1.0
    if lo == 0.0:
        return math.inf
    return hi / lo


@dataclass(frozen=True)
class WindowProfile:
    window_start_s: float
    prefill_s: dict[int, float]
    mean_bs: dict[int, float]
    hit_ratio: float | None


def _window_count(end_us: int, window_us: int) -> int:
    return max(1, -(-end_us // window_us)) if end_us > 0 else 0


def imbalance_profile(
    report: RunReport, window_s: float = 10.0
) -> tuple[list[WindowProfile], tuple[int, int]]:
    """Windowed prefill seconds and mean bs per instance.

    Returns the profiles and the two instances with the highest standard
    deviation of windowed prefill time (an instance paired with itself when
    fewer than two exist).
    """
    window_us = int(window_s * 1e6)
    n_win = _window_count(report.end_us, window_us)
    n_inst = report.n_instances
    prefill = [[0.0] * n_inst for _ in range(n_win)]
    for step in report.steps:
        if step.end_us <= step.start_us or step.prefill_us == 0:
            continue
        dur = step.end_us - step.start_us
        w = step.start_us // window_us
        while w * window_us < step.end_us:
            lo = max(step.start_us, w * window_us)
            hi = min(step.end_us, (w + 1) * window_us)
            if w < n_win:
                prefill[w][step.instance] += step.prefill_us * (hi - lo) / dur / 1e6
            w += 1

    mean_bs = [[0.0] * n_inst for _ in range(n_win)]
    for inst, series in report.bs_series.items():
        prev_t, prev_bs = 0, 0
        for t, bs in list(series) + [(report.end_us, 0)]:
            if t > prev_t and prev_bs:
                w = prev_t // window_us
                while w * window_us < t:
                    lo = max(prev_t, w * window_us)
                    hi = min(t, (w + 1) * window_us)
                    if w < n_win:
                        mean_bs[w][inst] += prev_bs * (hi - lo)
                    w += 1
            prev_t, prev_bs = t, bs

    hits = hit_timeline(report, window_s)
    hit_by_win = {row[0]: row[1] for row in hits}

    profiles: list[WindowProfile] = []
    for w in range(n_win):
        start_us = w * window_us
        covered = min((w + 1) * window_us, report.end_us) - start_us
        profiles.append(
            WindowProfile(
                window_start_s=start_us / 1e6,
                prefill_s={i: prefill[w][i] for i in range(n_inst)},
                mean_bs={
                    i: (mean_bs[w][i] / covered if covered > 0 else 0.0)
                    for i in range(n_inst)
                },
                hit_ratio=hit_by_win.get(start_us / 1e6),
            )
        )

    if n_inst < 2 or n_win == 0:
        return profiles, (0, 0)
    stds = [
        statistics.pstdev([profiles[w].prefill_s[i] for w in range(n_win)])
        if n_win > 1
        else 0.0
        for i in range(n_inst)
    ]
    ranked = sorted(range(n_inst), key=lambda i: (-stds[i], i))
    return profiles, (ranked[0], ranked[1])


def prefill_imbalance_std(report: RunReport, window_s: float = 10.0) -> float | None:
    """Mean over windows of the across-instance stddev of prefill seconds."""
    profiles, _ = imbalance_profile(report, window_s)
    if not profiles or report.n_instances < 2:
        return None
    per_window = [
        statistics.pstdev([p.prefill_s[i] for i in range(report.n_instances)])
        for p in profiles
    ]
    return sum(per_window) / len(per_window)


def hit_timeline(
    report: RunReport, window_s: float = 10.0, request_weighted: bool = False
) -> list[tuple[float, float | None, int, int]]:
    """Per-window (start_s, hit_ratio, hit_tokens, input_tokens) rows."""
    window_us = int(window_s * 1e6)
    n_win = _window_count(report.end_us, window_us)
    hit_tok = [0] * n_win
    in_tok = [0] * n_win
    ratios: list[list[float]] = [[] for _ in range(n_win)]
    for r in report.requests:
        w = min(r.arrival_us // window_us, n_win - 1) if n_win else 0
        if n_win == 0:
            continue
        hit_tok[w] += r.hit_tokens
        in_tok[w] += r.input_tokens
        ratios[w].append(r.hit_ratio)
    rows = []
    for w in range(n_win):
        if request_weighted:
            ratio = sum(ratios[w]) / len(ratios[w]) if ratios[w] else None
        else:
            ratio = hit_tok[w] / in_tok[w] if in_tok[w] else None
        rows.append((w * window_us / 1e6, ratio, hit_tok[w], in_tok[w]))
    return rows


# -- export ------------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def summarize(report: RunReport, request_weighted_hits: bool = False) -> dict:
    ttft = [v / 1000.0 for v in report.ttft_series_us()]
    tpot = [v / 1000.0 for v in report.tpot_series_us()]

    def stats(series):
        if not series:
            return {"mean": None, "p50": None, "p95": None, "p99": None}
        return {
            "mean": sum(series) / len(series),
            "p50": percentile(series, 50),
            "p95": percentile(series, 95),
            "p99": percentile(series, 99),
        }

    t, o = stats(ttft), stats(tpot)
    spread = bs_spread(report)
    return {
        "policy": report.policy_kind,
        "seed": report.seed,
        "n_instances": report.n_instances,
        "routed": report.routed,
        "finished": report.finished,
        "queued_at_last_arrival": report.queued_at_last_arrival,
        "arrivals_hash": report.arrivals_hash,
        "sim_end_s": report.end_us / 1e6,
        "hit_ratio": report.cluster_hit_ratio(request_weighted_hits),
        "ttft_count": len(ttft),
        "mean_ttft_ms": t["mean"],
        "p50_ttft_ms": t["p50"],
        "p95_ttft_ms": t["p95"],
        "p99_ttft_ms": t["p99"],
        "tpot_count": len(tpot),
        "mean_tpot_ms": o["mean"],
        "p50_tpot_ms": o["p50"],
        "p95_tpot_ms": o["p95"],
        "p99_tpot_ms": o["p99"],
        "mean_bs_spread": None if spread is None or math.isinf(spread) else spread,
        "prefill_imbalance_std_s": prefill_imbalance_std(report),
    }


REQUEST_COLUMNS = (
    "request_id",
    "arrival_s",
    "chosen_instance",
    "class_key",
    "input_tokens",
    "output_tokens",
    "hit_ratio",
    "ttft_ms",
    "tpot_ms",
    "queue_delay_ms",
    "first_token_s",
    "finish_s",
)


def export(
    report: RunReport, out_dir: str | Path, request_weighted_hits: bool = False
) -> list[Path]:
    """Write all report files into ``out_dir``; returns the paths written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    def us_ms(v):
        return None if v is None else v / 1000.0

    def us_s(v):
        return None if v is None else v / 1e6

    rows = [
        (
            r.request_id,
            r.arrival_us / 1e6,
            r.chosen_instance,
            r.class_key,
            r.input_tokens,
            r.output_tokens,
            r.hit_ratio,
            us_ms(r.ttft_us),
            us_ms(r.tpot_us),
            us_ms(r.queue_delay_us),
            us_s(r.first_token_us),
            us_s(r.finish_us),
        )
        for r in report.requests
    ]
    path = out / "requests.csv"
    _write_csv(path, REQUEST_COLUMNS, rows)
    written.append(path)

    for name, series in (
        ("cdf_ttft.csv", [v / 1000.0 for v in report.ttft_series_us()]),
        ("cdf_tpot.csv", [v / 1000.0 for v in report.tpot_series_us()]),
    ):
        data = sorted(series)
        n = len(data)
        path = out / name
        _write_csv(
            path,
            ("value_ms", "cum_fraction"),
            [(v, (i + 1) / n) for i, v in enumerate(data)],
        )
        written.append(path)

    path = out / "hit_timeline.csv"
    _write_csv(
        path,
        ("window_start_s", "hit_ratio", "hit_tokens", "input_tokens"),
        hit_timeline(report, request_weighted=request_weighted_hits),
    )
    written.append(path)

    profiles, _top = imbalance_profile(report)
    rows = []
    for p in profiles:
        for i in range(report.n_instances):
            rows.append((p.window_start_s, i, p.prefill_s[i], p.mean_bs[i]))
    path = out / "imbalance.csv"
    _write_csv(path, ("window_start_s", "instance", "prefill_s", "mean_bs"), rows)
    written.append(path)

    if report.detector_enabled:
        path = out / "detector.csv"
        _write_csv(
            path,
            (
                "window_start_s",
                "class_key",
                "arrival_fraction",
                "holders",
                "others",
                "suspect",
                "phase",
            ),
            [
                (
                    d.window_start_s,
                    d.class_key,
                    d.fraction,
                    d.n_holders,
                    d.n_others,
                    int(d.suspect),
                    d.phase,
                )
                for d in report.detector_rows
            ],
        )
        written.append(path)

    path = out / "summary.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summarize(report, request_weighted_hits), fh, indent=2, sort_keys=True)
        fh.write("\n")
    written.append(path)
    return written
