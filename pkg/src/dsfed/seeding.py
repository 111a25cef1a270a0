"""Deterministic RNG derivation.

Every random draw in the simulator comes from a Generator produced by
``rng_for(seed, *tags)``, so the whole run is a pure function of the root
seed plus a readable tag path (e.g. ``rng_for(seed, "local", round, client)``).
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFF
    return zlib.crc32(str(tag).encode("utf-8"))


def rng_for(seed: int, *tags) -> np.random.Generator:
    """Generator keyed by (seed, tags); stable across runs and platforms."""
    entropy = [int(seed) & 0xFFFFFFFF] + [_tag_to_int(t) for t in tags]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
