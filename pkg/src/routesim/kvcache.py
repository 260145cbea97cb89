"""Per-instance prefix KV-cache model.

The cache stores prefix *chains* at block granularity: a chain of length k
stands for the KV tensors of the first k input blocks of some request.
Chains are keyed by a running 64-bit hash of the block sequence (see
``hashing.chain_keys``), which gives radix-tree semantics with a flat map.

Invariants maintained by every operation:

* prefix closure: if a chain of length k is present, all of its prefixes
  are present too;
* occupancy never exceeds ``capacity_blocks`` (``None`` means infinite);
* pinned chains (blocks referenced by in-flight requests) are never
  evicted.

Eviction is strict LRU on last-touch time, ties broken deeper-chain-first
so leaves disappear before the interior nodes they hang off.
"""

from __future__ import annotations

import heapq
from typing import Iterable, Sequence

from .hashing import chain_keys

INFINITE: None = None


class CacheFullError(Exception):
    """Pinned blocks alone exceed the configured capacity."""


class _Entry:
    __slots__ = ("last_touch_us", "depth", "parent_key", "pin_count")

    def __init__(self, last_touch_us: int, depth: int, parent_key: int) -> None:
        self.last_touch_us = last_touch_us
        self.depth = depth
        self.parent_key = parent_key
        self.pin_count = 0


_ROOT = 0  # sentinel parent for depth-1 entries


class PrefixCache:
    """Block-granular prefix store with LRU eviction and pinning."""

    def __init__(self, capacity_blocks: int | None = 40_000) -> None:
        if capacity_blocks is not None and capacity_blocks < 1:
            raise ValueError("capacity_blocks must be >= 1 or None for infinite")
        self.capacity_blocks = capacity_blocks
        self._entries: dict[int, _Entry] = {}
        # lazy LRU heap of (last_touch_us, -depth, chain_key); stale items
        # are skipped on pop. Unused in infinite mode.
        self._heap: list[tuple[int, int, int]] = []

    # -- queries ---------------------------------------------------------

    @property
    def occupancy(self) -> int:
        return len(self._entries)

    def match_keys(self, keys: Sequence[int]) -> int:
        """Length of the longest present prefix chain. Read-only."""
        entries = self._entries
        hit = 0
        for k in keys:
            if k in entries:
                hit += 1
            else:
                break  # prefix closure: nothing deeper can be present
        return hit

    def match_prefix(self, blocks: Sequence[int]) -> int:
        return self.match_keys(chain_keys(blocks))

    # -- mutation --------------------------------------------------------

    def insert_keys(self, keys: Sequence[int], now_us: int) -> int:
        """Ensure all prefix chains of ``keys`` are present, touched at now.

        Returns the number of blocks evicted to stay within capacity.
        Raises CacheFullError only if pinned blocks alone exceed capacity.
        """
        entries = self._entries
        track = self.capacity_blocks is not None
        parent = _ROOT
        depth = 0
        for k in keys:
            depth += 1
            entry = entries.get(k)
            if entry is None:
                entry = _Entry(now_us, depth, parent)
                entries[k] = entry
            else:
                # recency never moves backward: finish-time inserts may be
                # stamped later than touches processed afterwards
                entry.last_touch_us = max(entry.last_touch_us, now_us)
            if track:
                heapq.heappush(self._heap, (entry.last_touch_us, -depth, k))
            parent = k
        return self._evict_over_capacity()

    def insert(self, blocks: Sequence[int], now_us: int) -> int:
        return self.insert_keys(chain_keys(blocks), now_us)

    def touch_keys(self, keys: Sequence[int], upto: int, now_us: int) -> None:
        """Refresh recency of present chains ``keys[:upto]``. No inserts."""
        entries = self._entries
        track = self.capacity_blocks is not None
        for i in range(upto):
            entry = entries.get(keys[i])
            if entry is None:
                break
            entry.last_touch_us = max(entry.last_touch_us, now_us)
            if track:
                heapq.heappush(self._heap, (entry.last_touch_us, -entry.depth, keys[i]))

    def touch(self, blocks: Sequence[int], now_us: int) -> None:
        keys = chain_keys(blocks)
        self.touch_keys(keys, self.match_keys(keys), now_us)

    def pin_keys(self, keys: Sequence[int], upto: int) -> None:
        """Protect chains ``keys[:upto]`` (and thus the whole path) from
        eviction until unpinned. Chains must be present."""
        entries = self._entries
        for i in range(upto):
            entries[keys[i]].pin_count += 1

    def unpin_keys(self, keys: Sequence[int], upto: int) -> None:
        entries = self._entries
        for i in range(upto):
            entry = entries.get(keys[i])
            if entry is None or entry.pin_count <= 0:
                raise ValueError("unpin of a chain that is not pinned")
            entry.pin_count -= 1

    # -- eviction --------------------------------------------------------

    def _evict_over_capacity(self) -> int:
        cap = self.capacity_blocks
        if cap is None:
            return 0
        entries = self._entries
        heap = self._heap
        evicted = 0
        pinned_skipped: list[tuple[int, int, int]] = []
        while len(entries) > cap and heap:
            touch, neg_depth, key = heapq.heappop(heap)
            entry = entries.get(key)
            if entry is None or entry.last_touch_us != touch:
                continue  # stale heap item
            if entry.pin_count > 0:
                pinned_skipped.append((touch, neg_depth, key))
                continue
            del entries[key]
            evicted += 1
        for item in pinned_skipped:
            heapq.heappush(heap, item)
        if len(entries) > cap:
            raise CacheFullError(
                f"pinned blocks exceed capacity: {len(entries)} > {cap}"
            )
        if len(heap) > 4 * len(entries) + 64:
            self._compact_heap()
        return evicted

    def _compact_heap(self) -> None:
        self._heap = [
            (e.last_touch_us, -e.depth, k) for k, e in self._entries.items()
        ]
        heapq.heapify(self._heap)

    # -- diagnostics -----------------------------------------------------

    def check_invariants(self) -> None:
        """Raise AssertionError if any structural invariant is violated."""
        entries = self._entries
        cap = self.capacity_blocks
        assert cap is None or len(entries) <= cap, "occupancy over capacity"
        for key, entry in entries.items():
            assert entry.depth >= 1
            assert entry.pin_count >= 0
            if entry.depth == 1:
                continue
            parent = entries.get(entry.parent_key)
            assert parent is not None, "prefix closure violated"
            assert parent.depth == entry.depth - 1
            assert parent.last_touch_us >= entry.last_touch_us, (
                "parent older than child breaks LRU eviction safety"
            )
            assert parent.pin_count >= entry.pin_count, "pin must cover the path"

    def chains(self) -> Iterable[int]:
        """Present chain keys, for tests and debug dumps."""
        return self._entries.keys()
