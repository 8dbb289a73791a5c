"""Seed expansion.

Every random stream in a run is keyed off the master seed with
:func:`derive_seed`, e.g. ``derive_seed(master, "sampling", round)``. Keys are
folded in one at a time through the splitmix64 finalizer, so a stream depends
only on its own key path and adding a new consumer never shifts an existing
one.
"""
from __future__ import annotations

import zlib

import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def _key_to_int(key: int | str) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8")) | (1 << 40)
    return int(key) & _MASK


def derive_seed(master: int, *keys: int | str) -> int:
    state = splitmix64(int(master) & _MASK)
    for key in keys:
        state = splitmix64(state ^ _key_to_int(key))
    return state >> 1


def rng_for(master: int, *keys: int | str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *keys))
