"""Seed plumbing: one base seed fans out into named, reproducible substreams.

Streams are numpy PCG64 generators keyed by (base_seed, crc32(name), *extra).
The same key always yields the same stream, independent of call order, so a
single recorded seed reproduces every random draw in a run.
"""

from __future__ import annotations

import zlib

import numpy as np


def substream(base_seed: int, name: str, *extra: int) -> np.random.Generator:
    """Return the generator for substream `name` (optionally indexed)."""
    key = (int(base_seed), zlib.crc32(name.encode("utf-8")), *map(int, extra))
    return np.random.default_rng(np.random.SeedSequence(key))
