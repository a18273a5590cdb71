"""Seedable, splittable counter-based random streams.

All randomness in the package flows from ``make_rng`` (numpy's Philox
counter-based bit generator). Independent child streams are derived with
``derive_seed``: the parent seed is XOR-ed with a 64-bit FNV-1a hash of the
child's name and passed through the SplitMix64 finaliser, so changing
either input flips about half the output bits.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(text: str) -> int:
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK
    return h


def splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive_seed(seed: int, *names) -> int:
    """Child seed for ``names`` under ``seed``; applied left to right."""
    s = int(seed) & _MASK
    for name in names:
        s = splitmix64(s ^ fnv1a64(str(name)))
    return s


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed) & _MASK))
