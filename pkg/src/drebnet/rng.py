"""Named, splittable random streams: (seed, names...) always yields the same Generator."""
from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def stream(seed: int, *names) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFF] + [_key(n) for n in names]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def derive_seed(seed: int, *names) -> int:
    """Integer seed for a sub-task, e.g. per-image seeds from a global seed."""
    return int(stream(seed, *names).integers(0, 2**31 - 1))
