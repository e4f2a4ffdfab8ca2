"""Named random streams.

Every stochastic consumer draws from its own counter-based Philox stream keyed
by ``(seed, tag)``, so adding a consumer never perturbs the draws of another.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, tag: str, *extra: int) -> np.random.Generator:
    """Return an independent generator for ``(seed, tag, *extra)``.

    The tag is hashed with CRC32 so the mapping is stable across Python
    processes (unlike ``hash``).
    """
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    key = [int(seed), zlib.crc32(tag.encode("utf-8"))]
    key.extend(int(e) for e in extra)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def as_generator(seed_or_rng, tag: str = "default") -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return stream(int(seed_or_rng), tag)
