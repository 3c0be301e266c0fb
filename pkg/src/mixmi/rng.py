"""Named deterministic random streams.

All randomness in the package flows from a single 64-bit seed through
named sub-streams, so that independent consumers (chains, masking,
data synthesis) never share or perturb each other's draws regardless
of execution order or thread count.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, *tags: int | str) -> np.random.Generator:
    """Return a generator for the sub-stream identified by (seed, *tags).

    Tags may be ints (e.g. a chain index) or short strings (a purpose
    label such as "fill" or "order"). String tags are hashed with a
    stable CRC so the mapping is identical across platforms and runs.
    """
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for tag in tags:
        if isinstance(tag, str):
            words.append(zlib.crc32(tag.encode("utf-8")))
        else:
            words.append(int(tag) & 0xFFFFFFFFFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(words))
