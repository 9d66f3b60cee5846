"""Deterministic seed derivation.

Every random draw in the pipeline comes from a numpy Generator seeded
through ``mix64``, so any unit of work (one synthesized pair, one epoch
shuffle, one dataset image) is reproducible from its integer coordinates
alone and independent of generation order.
"""

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    """One step of the splitmix64 output function."""
    x = (x + _GOLDEN) & _MASK64
    z = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def mix64(*parts: int) -> int:
    """Fold integer coordinates into one well-mixed 64-bit seed.

    ``mix64(a, b)`` and ``mix64(a, c)`` are decorrelated even for small
    consecutive inputs; negative parts are reduced mod 2**64.
    """
    h = 0
    for p in parts:
        h = splitmix64((h ^ (int(p) & _MASK64)) & _MASK64)
    return h


def make_rng(*parts: int) -> np.random.Generator:
    """PCG64 generator seeded from ``mix64(*parts)``."""
    return np.random.Generator(np.random.PCG64(mix64(*parts)))


def stable_id(text: str) -> int:
    """Process-independent 64-bit id for a string (blake2b, not hash())."""
    return int.from_bytes(
        hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little"
    )
