"""Named random sub-streams derived from a single master seed."""
from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & (2**64 - 1)
    return zlib.crc32(str(part).encode("utf-8"))


def stream(seed: int, *names) -> np.random.Generator:
    """Generator for the sub-stream ``names`` of ``seed``.

    Distinct name paths give statistically independent streams, so adding a
    consumer never shifts the numbers another consumer sees.
    """
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=tuple(_key(n) for n in names))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed: int, *names) -> int:
    """A 64-bit integer seed for the sub-stream ``names``."""
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=tuple(_key(n) for n in names))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
