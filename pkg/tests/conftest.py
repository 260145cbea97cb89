"""Shared builders for the test suite."""

from __future__ import annotations

import pytest

from routesim.engine import CostModel, InstanceSim
from routesim.kvcache import PrefixCache
from routesim.trace import TraceRecord


def make_record(
    request_id: int = 0,
    arrival_s: float = 0.0,
    blocks: tuple[int, ...] | None = None,
    input_tokens: int | None = None,
    output_tokens: int = 4,
    block_size: int = 16,
) -> TraceRecord:
    if blocks is None:
        n_blocks = -(-(input_tokens or 64) // block_size)
        blocks = tuple(1000 + request_id * 100 + i for i in range(n_blocks))
    if input_tokens is None:
        input_tokens = len(blocks) * block_size
    return TraceRecord(
        request_id=request_id,
        arrival_s=arrival_s,
        prefix_blocks=blocks,
        input_tokens=input_tokens,
        output_tokens=output_tokens,
        class_key=0,
    )


def make_instance(
    instance_id: int = 0,
    cost_model: CostModel | None = None,
    capacity_blocks: int | None = None,
    block_size: int = 16,
    debug: bool = True,
) -> InstanceSim:
    return InstanceSim(
        instance_id,
        cost_model or CostModel(),
        PrefixCache(capacity_blocks),
        block_size,
        debug=debug,
    )


@pytest.fixture
def instance() -> InstanceSim:
    return make_instance()
