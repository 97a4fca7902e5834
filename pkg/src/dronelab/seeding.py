"""One 64-bit seed fans out into independent named random streams."""

from __future__ import annotations

import zlib

import numpy as np


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def rng_for(seed: int, stream: str, *counters: int) -> np.random.Generator:
    """Generator for ``(seed, stream, counters...)``; streams never overlap."""
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(stream_key(stream), *counters))
    return np.random.default_rng(ss)
