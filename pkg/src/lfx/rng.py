"""Named, splittable random streams derived from a single integer seed.

Every stochastic component asks for ``generator(seed, "encoder", "backbone")``
instead of seeding its own RNG, so module-level streams are derived from the
run seed and never collide.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key(name: str | int) -> int:
    if isinstance(name, int):
        return name
    return zlib.crc32(name.encode("utf-8"))


def seed_sequence(seed: int, *names: str | int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(n) for n in names))


def generator(seed: int, *names: str | int) -> np.random.Generator:
    """Return a PCG64 generator for the stream ``names`` under ``seed``."""
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *names)))
