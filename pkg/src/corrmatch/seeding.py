"""Counter-based seed derivation.

Every random stream in the package is obtained from a master seed and a
tuple of integer or string keys, so trials, grid points and groups can be
generated in any order (or in parallel) and still reproduce bit for bit.

The mixer is SplitMix64 (Steele, Lea & Flood 2014)::

    z = (x + 0x9E3779B97F4A7C15) mod 2**64
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 mod 2**64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB mod 2**64
    z = z ^ (z >> 31)

``derive_seed(master, k1, k2, ...)`` folds the keys left to right:
``h = splitmix64(master); h = splitmix64(h ^ key_i)``.  String keys are
reduced to 64 bits with FNV-1a first.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def _fnv1a(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & _MASK
    return h


def derive_seed(master: int, *keys: int | str) -> int:
    """Mix ``master`` with ``keys`` into a 64-bit seed."""
    h = splitmix64(int(master) & _MASK)
    for key in keys:
        k = _fnv1a(key) if isinstance(key, str) else int(key) & _MASK
        h = splitmix64(h ^ k)
    return h


def rng_for(master: int, *keys: int | str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *keys))
