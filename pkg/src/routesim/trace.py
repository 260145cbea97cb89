"""Request traces: loading, saving, rescaling, and synthetic generation.

Trace files are line-delimited JSON records:

    {"id":u64,"arrival_s":f64,"blocks":[u64...],"in":u32,"out":u32,"class":u64}

``class`` is optional on input; it is derived from the leading blocks when
absent. The writer always emits the keys in the order above, so a
load/save cycle round-trips byte-for-byte.
"""

from __future__ import annotations

import dataclasses
import json
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .detector import class_key
from .hashing import MASK64, stable_key

_SHARED_SALT = 0x5EED_0001
_SUFFIX_SALT = 0x5EED_0002
_CLASS_RNG_SALT = 0x5EED_0003


class TraceError(Exception):
    """Malformed or inconsistent trace input.

    ``line`` is the 1-based line number for file-level errors, when known.
    """

    def __init__(self, message: str, line: int | None = None) -> None:
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class TraceRecord:
    """One request to replay.

    Output length is replayed verbatim: the simulated instance decodes
    exactly ``output_tokens`` tokens no matter what.
    """

    request_id: int
    arrival_s: float
    prefix_blocks: tuple[int, ...]
    input_tokens: int
    output_tokens: int
    class_key: int


@dataclass(frozen=True)
class ClassSpec:
    """One request class in a synthetic workload.

    Requests of a class share ``shared_blocks`` leading prefix blocks and
    append a fresh, never-repeating suffix. ``suffix_blocks`` and
    ``output_tokens`` are inclusive uniform integer ranges.
    """

    weight: float
    shared_blocks: int
    suffix_blocks: tuple[int, int] = (2, 4)
    output_tokens: tuple[int, int] = (32, 64)


@dataclass(frozen=True)
class SyntheticSpec:
    """Poisson-mixed multi-class workload description."""

    duration_s: float
    mean_rate_rps: float
    classes: tuple[ClassSpec, ...]
    seed: int = 0
    block_size: int = 16

    def validate(self) -> None:
        if self.duration_s <= 0 or self.mean_rate_rps <= 0 or self.block_size < 1:
            raise TraceError("duration, rate, and block size must be positive")
        if not self.classes:
            raise TraceError("at least one request class is required")
        total = sum(c.weight for c in self.classes)
        if abs(total - 1.0) > 1e-9:
            raise TraceError(f"class weights must sum to 1.0, got {total}")
        for c in self.classes:
            if c.weight <= 0:
                raise TraceError("class weights must be positive")
            if c.shared_blocks < 0 or c.suffix_blocks[0] < 0:
                raise TraceError("block counts must be non-negative")
            if c.shared_blocks + c.suffix_blocks[0] < 1:
                raise TraceError("each request needs at least one block")
            if c.suffix_blocks[0] > c.suffix_blocks[1]:
                raise TraceError("suffix_blocks range is inverted")
            if c.output_tokens[0] < 1 or c.output_tokens[0] > c.output_tokens[1]:
                raise TraceError("output_tokens range must be >= 1 and ordered")


# -- file I/O ------------------------------------------------------------

_REQUIRED_FIELDS = ("id", "arrival_s", "blocks", "in", "out")


def _parse_line(text: str, line_no: int) -> TraceRecord:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TraceError(f"invalid JSON: {exc.msg}", line_no) from exc
    if not isinstance(obj, dict):
        raise TraceError("record is not an object", line_no)
    for field in _REQUIRED_FIELDS:
        if field not in obj:
            raise TraceError(f"missing field {field!r}", line_no)
    rid, arrival, blocks = obj["id"], obj["arrival_s"], obj["blocks"]
    in_tok, out_tok = obj["in"], obj["out"]
    if not isinstance(rid, int) or rid < 0:
        raise TraceError("id must be a non-negative integer", line_no)
    if not isinstance(arrival, (int, float)) or isinstance(arrival, bool) or arrival < 0:
        raise TraceError("arrival_s must be a non-negative number", line_no)
    if not isinstance(blocks, list) or not blocks:
        raise TraceError("blocks must be a non-empty list", line_no)
    for b in blocks:
        if not isinstance(b, int) or b < 0 or b > MASK64:
            raise TraceError("block hashes must be u64", line_no)
    if not isinstance(in_tok, int) or in_tok < 1:
        raise TraceError("in must be a positive integer", line_no)
    if not isinstance(out_tok, int) or out_tok < 1:
        raise TraceError("out must be a positive integer", line_no)
    cls = obj.get("class")
    if cls is None:
        cls = class_key(blocks)
    elif not isinstance(cls, int) or cls < 0 or cls > MASK64:
        raise TraceError("class must be u64", line_no)
    return TraceRecord(
        request_id=rid,
        arrival_s=float(arrival),
        prefix_blocks=tuple(blocks),
        input_tokens=in_tok,
        output_tokens=out_tok,
        class_key=cls,
    )


def load_trace(path: str | Path) -> list[TraceRecord]:
    """Parse a trace file, rejecting the whole file on any malformed line."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise TraceError(f"cannot read trace file {path}: {exc}") from exc
    records: list[TraceRecord] = []
    prev_arrival = -math.inf
    for line_no, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        record = _parse_line(line, line_no)
        if record.arrival_s < prev_arrival:
            raise TraceError(
                f"arrival {record.arrival_s} before previous {prev_arrival}",
                line_no,
            )
        prev_arrival = record.arrival_s
        records.append(record)
    return records


def save_trace(records: Iterable[TraceRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            obj = {
                "id": r.request_id,
                "arrival_s": r.arrival_s,
                "blocks": list(r.prefix_blocks),
                "in": r.input_tokens,
                "out": r.output_tokens,
                "class": r.class_key,
            }
            fh.write(json.dumps(obj, separators=(",", ":")))
            fh.write("\n")


# -- rescaling -----------------------------------------------------------

def observed_rate_rps(records: Sequence[TraceRecord]) -> float:
    """Mean arrival rate measured from inter-arrival span."""
    if len(records) < 2:
        raise TraceError("need at least 2 records to measure a rate")
    span = records[-1].arrival_s - records[0].arrival_s
    if span <= 0:
        raise TraceError("trace spans zero time; rate is undefined")
    return (len(records) - 1) / span


def scale_trace(
    records: Sequence[TraceRecord], target_rate_rps: float
) -> list[TraceRecord]:
    """Rescale arrivals to the target mean rate.

    Timestamps are shifted so the first arrival lands at 0, then multiplied
    by observed_rate/target_rate. Order, contents, and relative spacing
    ratios are preserved.
    """
    if target_rate_rps <= 0:
        raise TraceError("target rate must be positive")
    factor = observed_rate_rps(records) / target_rate_rps
    first = records[0].arrival_s
    return [
        dataclasses.replace(r, arrival_s=(r.arrival_s - first) * factor)
        for r in records
    ]


# -- synthesis -----------------------------------------------------------

def generate_synthetic(spec: SyntheticSpec) -> list[TraceRecord]:
    """Deterministically generate a trace from a SyntheticSpec.

    Each class is an independent Poisson arrival process at
    weight * mean_rate_rps; per-class request fractions therefore converge
    to the weights. Inputs are whole blocks: shared class prefix followed
    by a fresh suffix unique to the request.
    """
    spec.validate()
    arrivals: list[tuple[float, int, int]] = []  # (t, class_idx, seq_in_class)
    for ci, cls in enumerate(spec.classes):
        rng = random.Random(stable_key(spec.seed, _CLASS_RNG_SALT, ci))
        rate = cls.weight * spec.mean_rate_rps
        t = rng.expovariate(rate)
        seq = 0
        while t < spec.duration_s:
            arrivals.append((t, ci, seq))
            seq += 1
            t += rng.expovariate(rate)
    arrivals.sort()

    shared_chains = [
        [stable_key(spec.seed, _SHARED_SALT, ci, pos) for pos in range(c.shared_blocks)]
        for ci, c in enumerate(spec.classes)
    ]
    size_rngs = [
        random.Random(stable_key(spec.seed, _CLASS_RNG_SALT, ci, 1))
        for ci in range(len(spec.classes))
    ]

    records: list[TraceRecord] = []
    for rid, (t, ci, seq) in enumerate(arrivals):
        cls = spec.classes[ci]
        rng = size_rngs[ci]
        n_suffix = rng.randint(*cls.suffix_blocks)
        out_tokens = rng.randint(*cls.output_tokens)
        blocks = list(shared_chains[ci])
        blocks.extend(
            stable_key(spec.seed, _SUFFIX_SALT, ci, seq, pos) for pos in range(n_suffix)
        )
        records.append(
            TraceRecord(
                request_id=rid,
                arrival_s=t,
                prefix_blocks=tuple(blocks),
                input_tokens=len(blocks) * spec.block_size,
                output_tokens=out_tokens,
                class_key=class_key(blocks),
            )
        )
    return records


def validate_against_block_size(
    records: Sequence[TraceRecord], block_size: int
) -> None:
    """Check the block-count/token-count consistency of every record."""
    for r in records:
        want = math.ceil(r.input_tokens / block_size)
        if want != len(r.prefix_blocks):
            raise TraceError(
                f"record {r.request_id}: {len(r.prefix_blocks)} blocks but "
                f"{r.input_tokens} tokens implies {want} at block size {block_size}"
            )
