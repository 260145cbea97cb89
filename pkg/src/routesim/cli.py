"""Command-line entry points.

Subcommands:

    run      simulate one trace under one policy and export metrics
    compare  run several policies over identical arrivals, side by side
    audit    offline hotspot audit of a trace (infinite caches)
    probe    binary-search the sustainable arrival rate
    gen      generate a synthetic trace file from a spec

Flags mirror config-file keys and win over file values. The default
output directory comes from $ROUTESIM_OUT, falling back to ./out.
Exit codes: 0 success, 1 user/config error, 2 internal invariant
violation.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from . import metrics
from .cluster import ClusterConfig, ClusterSim, CacheConfig, probe_capacity, run
from .config import (
    ConfigError,
    TraceSource,
    load_config,
    synthetic_spec_from_dict,
)
from .detector import DetectorConfig
from .engine import InvariantError
from .metrics import export, percentile, summarize
from .policies import POLICY_KINDS
from .trace import (
    TraceError,
    TraceRecord,
    generate_synthetic,
    load_trace,
    save_trace,
    scale_trace,
)


class CliError(Exception):
    """User-facing error; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # noqa: D102 - argparse hook
        raise CliError(message)


def _default_out() -> str:
    return os.environ.get("ROUTESIM_OUT", "out")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--trace", help="trace file (line-delimited JSON)")
    p.add_argument("--synthetic", help="synthetic trace spec (JSON file)")
    p.add_argument("--policy", choices=POLICY_KINDS, help="override policy kind")
    p.add_argument("--rate", type=float, help="rescale arrivals to this rate (rps)")
    p.add_argument("--seed", type=int, help="override cluster seed")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument(
        "--debug-checks",
        action="store_true",
        help="run internal invariant checks after every event",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="routesim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="simulate one trace and export metrics")
    _add_common(p_run)

    p_cmp = sub.add_parser("compare", help="run multiple policies on one trace")
    _add_common(p_cmp)
    p_cmp.add_argument(
        "--policies",
        required=True,
        help="comma-separated policy kinds (at least two, no duplicates)",
    )
    p_cmp.add_argument(
        "--rates",
        help="comma-separated fractions of probed capacity to sweep, e.g. 0.3,0.5",
    )

    p_audit = sub.add_parser("audit", help="offline hotspot audit of a trace")
    p_audit.add_argument("--trace", required=True)
    p_audit.add_argument("--instances", type=int, default=16)
    p_audit.add_argument("--window-s", type=float, default=60.0)
    p_audit.add_argument("--top-k", type=int, default=8)
    p_audit.add_argument("--class-key-blocks", type=int, default=2)
    p_audit.add_argument("--out", default=None)

    p_probe = sub.add_parser("probe", help="probe sustainable arrival rate")
    _add_common(p_probe)

    p_gen = sub.add_parser("gen", help="generate a synthetic trace file")
    p_gen.add_argument("--spec", required=True, help="synthetic spec (JSON file)")
    p_gen.add_argument("--out", required=True, help="trace file to write")
    return parser


def _load_spec_file(path: str):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError(f"cannot read spec {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"spec {path} is not valid JSON: {exc}") from exc
    return synthetic_spec_from_dict(doc)


def _resolve(args) -> tuple[ClusterConfig, list[TraceRecord]]:
    """Merge config file and flags into a runnable (config, records) pair."""
    if args.config:
        cfg, source = load_config(args.config)
    else:
        cfg, source = ClusterConfig(), TraceSource()
    if args.trace and args.synthetic:
        raise CliError("give either --trace or --synthetic, not both")
    if args.trace:
        source = dataclasses.replace(source, path=args.trace, synthetic=None)
    elif args.synthetic:
        source = dataclasses.replace(
            source, synthetic=_load_spec_file(args.synthetic), path=None
        )
    source.validate()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.policy:
        cfg = dataclasses.replace(
            cfg, policy=dataclasses.replace(cfg.policy, kind=args.policy)
        )
    if args.debug_checks:
        cfg = dataclasses.replace(cfg, debug_checks=True)

    records = (
        load_trace(source.path) if source.path else generate_synthetic(source.synthetic)
    )
    rate = args.rate if args.rate is not None else source.rate_rps
    if rate is not None:
        records = scale_trace(records, rate)
    return cfg, records


def cmd_run(args) -> int:
    cfg, records = _resolve(args)
    report = run(records, cfg)
    out = Path(args.out or _default_out())
    export(report, out)
    summary = summarize(report)
    print(
        f"policy={summary['policy']} routed={summary['routed']} "
        f"finished={summary['finished']} mean_ttft_ms={summary['mean_ttft_ms']} "
        f"hit_ratio={summary['hit_ratio']} -> {out}"
    )
    return 0


_COMPARE_COLUMNS = (
    "policy",
    "mean_ttft_ms",
    "p50_ttft_ms",
    "p95_ttft_ms",
    "p99_ttft_ms",
    "mean_tpot_ms",
    "p50_tpot_ms",
    "p95_tpot_ms",
    "p99_tpot_ms",
    "hit_ratio",
)


def _compare_at(cfg, records, policies, out: Path) -> None:
    rows = []
    for kind in policies:
        run_cfg = dataclasses.replace(
            cfg, policy=dataclasses.replace(cfg.policy, kind=kind)
        )
        report = run(records, run_cfg)
        export(report, out / kind)
        summary = summarize(report)
        rows.append([summary[c] if c != "policy" else kind for c in _COMPARE_COLUMNS])
    metrics._write_csv(out / "compare.csv", _COMPARE_COLUMNS, rows)


def cmd_compare(args) -> int:
    policies = [p.strip() for p in args.policies.split(",") if p.strip()]
    if len(policies) < 2:
        raise CliError("compare needs at least two policies")
    if len(set(policies)) != len(policies):
        raise CliError("duplicate policy names in --policies")
    for p in policies:
        if p not in POLICY_KINDS:
            raise CliError(f"unknown policy {p!r}")
    cfg, records = _resolve(args)
    out = Path(args.out or _default_out())
    if args.rates:
        fractions = [float(x) for x in args.rates.split(",")]
        probed = probe_capacity(records, cfg)
        print(f"probed_capacity_rps={probed}")
        for frac in fractions:
            rated = scale_trace(records, probed * frac)
            _compare_at(cfg, rated, policies, out / f"rate_{frac:g}")
    else:
        _compare_at(cfg, records, policies, out)
    print(f"compared {len(policies)} policies -> {out}")
    return 0


def cmd_audit(args) -> int:
    records = load_trace(args.trace)
    cfg = ClusterConfig(
        n_instances=args.instances,
        cache=CacheConfig(capacity_blocks=None),
        detector=DetectorConfig(
            window_s=args.window_s,
            top_k_classes=args.top_k,
            class_key_blocks=args.class_key_blocks,
        ),
    )
    report = run(records, cfg)
    out = Path(args.out or _default_out())
    export(report, out)
    if report.first_violation_us is None:
        print("benign everywhere")
    else:
        print(f"first violation at t={report.first_violation_us / 1e6}s")
    return 0


def cmd_probe(args) -> int:
    cfg, records = _resolve(args)
    rate = probe_capacity(records, cfg)
    print(f"max_sustainable_rate_rps={rate}")
    return 0


def cmd_gen(args) -> int:
    spec = _load_spec_file(args.spec)
    records = generate_synthetic(spec)
    save_trace(records, args.out)
    print(f"wrote {len(records)} records -> {args.out}")
    return 0


_COMMANDS = {
    "run": cmd_run,
    "compare": cmd_compare,
    "audit": cmd_audit,
    "probe": cmd_probe,
    "gen": cmd_gen,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except (CliError, ConfigError, TraceError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (InvariantError, AssertionError) as exc:
        print(f"internal invariant violation: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
