"""Seed handling and per-purpose random stream splitting.

Every consumer of randomness asks for a stream by ``(seed, purpose, *index)``.
Streams are derived with :class:`numpy.random.SeedSequence` spawn keys, so a
stream never depends on how many draws another stream has made.  This is what
gives datasets their prefix property and lets Monte Carlo work be partitioned
across workers without changing results.
"""
from __future__ import annotations

import numpy as np

# purpose tags (part of the spawn key, never reorder)
MODEL = 1
DATA = 2
EVAL = 3
TRAIN = 4
BOOTSTRAP = 5
COVER = 6
AUDIT = 7

MASK64 = (1 << 64) - 1


def normalize_seed(seed: int) -> int:
    seed = int(seed)
    if seed < 0 or seed > MASK64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return seed


def stream(seed: int, purpose: int, *index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(normalize_seed(seed), spawn_key=(purpose, *map(int, index)))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed: int, purpose: int, *index: int) -> int:
    """A child u64 seed, for handing to code that takes a plain integer."""
    ss = np.random.SeedSequence(normalize_seed(seed), spawn_key=(purpose, *map(int, index)))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
