"""Named, per-epoch random streams.

A stream is keyed by (master seed, purpose, epoch). Draws for epoch k never
depend on how many numbers earlier epochs consumed, which makes resumed and
uninterrupted runs see the same samples.
"""

from __future__ import annotations

import zlib

import numpy as np


def seed_sequence(master: int, purpose: str, epoch: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master), zlib.crc32(purpose.encode()), int(epoch)])


def stream(master: int, purpose: str, epoch: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(master, purpose, epoch))


def derive_seed(master: int, purpose: str, epoch: int = 0) -> int:
    """A 63-bit integer seed, for APIs that take plain ints."""
    return int(seed_sequence(master, purpose, epoch).generate_state(2, np.uint64)[0] >> np.uint64(1))


def as_generator(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
