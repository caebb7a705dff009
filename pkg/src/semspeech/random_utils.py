"""Deterministic RNG derivation.

Every random draw in the toolkit flows from one 64-bit seed. Subsystems get
independent streams by deriving a child generator from (seed, *tags); the
same (seed, tags) always yields the same stream, and distinct tags yield
statistically independent ones.
"""

import zlib

import numpy as np


def derive_rng(seed: int, *tags: str | int) -> np.random.Generator:
    """Return a Generator keyed by ``seed`` and a stable hash of ``tags``."""
    key = tuple(zlib.crc32(str(t).encode("utf-8")) for t in tags)
    ss = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=key)
    return np.random.Generator(np.random.PCG64(ss))
