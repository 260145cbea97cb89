"""Stable 64-bit hashing helpers.

All identifiers in the simulator (block hashes, prefix-chain keys, class
keys) are 64-bit values derived with splitmix64 so that traces, cache
contents, and exports are reproducible across runs and platforms.
"""

from __future__ import annotations

MASK64 = (1 << 64) - 1

_CHAIN_SEED = 0x9E3779B97F4A7C15


def splitmix64(value: int) -> int:
    """Finalizer of the splitmix64 generator; a strong 64-bit mixer."""
    value = (value + 0x9E3779B97F4A7C15) & MASK64
    value = ((value ^ (value >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    value = ((value ^ (value >> 27)) * 0x94D049BB133111EB) & MASK64
    return (value ^ (value >> 31)) & MASK64


def combine64(acc: int, value: int) -> int:
    """Fold one more 64-bit value into a running hash."""
    return splitmix64((acc ^ (value & MASK64)) & MASK64)


def stable_key(*values: int) -> int:
    """Order-sensitive 64-bit key over a tuple of integers."""
    acc = _CHAIN_SEED
    for v in values:
        acc = combine64(acc, v)
    return acc


def chain_keys(blocks: "list[int] | tuple[int, ...]") -> list[int]:
    """Cumulative prefix-chain keys for a block-hash sequence.

    Element i keys the chain blocks[0..i]; equal prefixes yield equal keys
    regardless of what follows, which is what prefix matching relies on.
    """
    keys: list[int] = []
    acc = _CHAIN_SEED
    for b in blocks:
        acc = combine64(acc, b)
        keys.append(acc)
    return keys
