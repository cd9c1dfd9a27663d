"""Caller-owned, splittable random streams.

Every random draw in the package comes from a generator built here from an
integer seed plus a path of integer keys, so independent consumers never
share state and any stream can be rebuilt from its key path alone.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(k) -> int:
    if isinstance(k, (int, np.integer)):
        return int(k) & 0xFFFFFFFF
    return zlib.crc32(str(k).encode())


def make_rng(seed: int, *keys) -> np.random.Generator:
    """Counter-based (Philox) generator for the stream ``(seed, *keys)``."""
    entropy = [_key(seed)] + [_key(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return make_rng(int(seed))


def child_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**31 - 1))
