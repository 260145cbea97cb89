"""Discrete-event simulator and policy library for KV-cache-aware LLM
request routing across a cluster of serving instances."""

from .cluster import CacheConfig, ClusterConfig, ClusterSim, probe_capacity, run
from .detector import Detector, DetectorConfig, DetectorVerdict, class_key
from .engine import CostModel, InstanceSim
from .kvcache import INFINITE, PrefixCache
from .metrics import RunReport, export, percentile, summarize
from .policies import Policy, PolicyConfig, RoutingDecision
from .trace import (
    ClassSpec,
    SyntheticSpec,
    TraceRecord,
    generate_synthetic,
    load_trace,
    save_trace,
    scale_trace,
)

__version__ = "0.1.0"

__all__ = [
    "CacheConfig",
    "ClassSpec",
    "ClusterConfig",
    "ClusterSim",
    "CostModel",
    "Detector",
    "DetectorConfig",
    "DetectorVerdict",
    "INFINITE",
    "InstanceSim",
    "Policy",
    "PolicyConfig",
    "PrefixCache",
    "RoutingDecision",
    "RunReport",
    "SyntheticSpec",
    "TraceRecord",
    "class_key",
    "export",
    "generate_synthetic",
    "load_trace",
    "percentile",
    "probe_capacity",
    "run",
    "save_trace",
    "scale_trace",
    "summarize",
]
