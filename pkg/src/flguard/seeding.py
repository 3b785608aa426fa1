"""Counter-based seed derivation so every random draw in a run has its own stream."""

from __future__ import annotations

import hashlib

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _tag_word(tag: str) -> int:
    return int.from_bytes(hashlib.blake2b(tag.encode("utf-8"), digest_size=8).digest(), "little")


def derive_seeds(master_seed: int, round_index: int, client_id: int, purpose_tag: str) -> int:
    """Fold (master, round, client, tag) through splitmix64; returns a 63-bit seed."""
    h = splitmix64(master_seed & MASK64)
    for word in (round_index, client_id, _tag_word(purpose_tag)):
        h = splitmix64(h ^ (word & MASK64))
    return h >> 1
