"""Deterministic seed derivation.

Child seeds are derived from a master seed and a path of string/int tokens
with a splitmix64 finalizer over an FNV-1a token hash. Parallel workers and
dataset examples get disjoint streams by construction: every (master, path)
pair maps to one 64-bit seed, independent of call order.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def _fnv1a(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK
    return h


def derive_seed(master: int, *path: str | int) -> int:
    """Map (master, path tokens) to a 64-bit seed, stable across runs."""
    h = splitmix64(master & _MASK)
    for token in path:
        if isinstance(token, int):
            h = splitmix64(h ^ splitmix64(token & _MASK))
        else:
            h = splitmix64(h ^ _fnv1a(str(token).encode("utf-8")))
    return h


def rng_for(master: int, *path: str | int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(master, *path)))
