"""JSON configuration for simulations.

A config document has up to six blocks, all optional, every field
defaulted:

    {
      "cluster":    {"n_instances": 16, "staleness_ms": 0.0, "seed": 0,
                     "debug_checks": false, "parallel_instances": false},
      "cost_model": {"prefill_base_ms": 5.0, "prefill_per_token_ms": 0.1,
                     "decode_base_ms": 20.0, "decode_per_seq_ms": 1.0,
                     "decode_per_ctx_token_ms": 0.0,
                     "chunk_tokens": 2048, "max_batch_requests": 256},
      "cache":      {"block_size": 16, "capacity_blocks": 40000},
      "policy":     {"kind": "multiplicative", ...},
      "detector":   {"enabled": false, "window_s": 60.0, ...},
      "trace":      {"path": "trace.jsonl"} | {"synthetic": {...}},
    }

``cache.capacity_blocks: null`` selects an infinite cache. The trace block
may carry a ``rate`` to rescale arrivals before the run.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .cluster import CacheConfig, ClusterConfig
from .detector import DetectorConfig
from .engine import CostModel
from .policies import PolicyConfig
from .trace import ClassSpec, SyntheticSpec


class ConfigError(Exception):
    pass


def _build(cls, data: dict, where: str):
    """Instantiate a dataclass from a dict, rejecting unknown keys."""
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"bad {where} block: {exc}") from exc


def synthetic_spec_from_dict(data: dict) -> SyntheticSpec:
    data = dict(data)
    raw_classes = data.pop("classes", None)
    if not raw_classes:
        raise ConfigError("synthetic spec needs a non-empty 'classes' list")
    classes = []
    for i, c in enumerate(raw_classes):
        c = dict(c)
        for rng_field in ("suffix_blocks", "output_tokens"):
            if rng_field in c:
                lo, hi = c[rng_field]
                c[rng_field] = (int(lo), int(hi))
        classes.append(_build(ClassSpec, c, f"classes[{i}]"))
    data["classes"] = tuple(classes)
    spec = _build(SyntheticSpec, data, "synthetic")
    spec.validate()
    return spec


@dataclass(frozen=True)
class TraceSource:
    path: str | None = None
    synthetic: SyntheticSpec | None = None
    rate_rps: float | None = None

    def validate(self) -> None:
        if (self.path is None) == (self.synthetic is None):
            raise ConfigError("exactly one of trace path / synthetic spec required")


def cluster_config_from_dict(doc: dict) -> ClusterConfig:
    known = {"cluster", "cost_model", "cache", "policy", "detector", "trace"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown top-level block(s): {sorted(unknown)}")
    cost_model = _build(CostModel, doc.get("cost_model", {}), "cost_model")
    cache = _build(CacheConfig, doc.get("cache", {}), "cache")
    policy = _build(PolicyConfig, doc.get("policy", {}), "policy")

    det_block = dict(doc.get("detector", {}))
    enabled = det_block.pop("enabled", False)
    detector = _build(DetectorConfig, det_block, "detector") if enabled else None

    cluster_block = dict(doc.get("cluster", {}))
    allowed = {"n_instances", "staleness_ms", "seed", "debug_checks", "parallel_instances"}
    unknown = set(cluster_block) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in cluster: {sorted(unknown)}")
    cfg = ClusterConfig(
        cost_model=cost_model,
        cache=cache,
        policy=policy,
        detector=detector,
        **cluster_block,
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def trace_source_from_dict(doc: dict) -> TraceSource:
    block = dict(doc.get("trace", {}))
    rate = block.pop("rate", None)
    path = block.pop("path", None)
    synthetic = block.pop("synthetic", None)
    if block:
        raise ConfigError(f"unknown key(s) in trace: {sorted(block)}")
    return TraceSource(
        path=path,
        synthetic=synthetic_spec_from_dict(synthetic) if synthetic else None,
        rate_rps=rate,
    )


def load_config(path: str | Path) -> tuple[ClusterConfig, TraceSource]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    return cluster_config_from_dict(doc), trace_source_from_dict(doc)
