"""Named random streams.

Every random draw in the package comes from ``stream(seed, purpose, *index)``,
so that generation order never matters: utterance 17 gets the same noise
whether it is produced first, last, or in a separate process.
"""

from __future__ import annotations

import zlib

import numpy as np


def _purpose_key(purpose: str) -> int:
    # crc32 is stable across interpreter runs, unlike hash()
    return zlib.crc32(purpose.encode("utf-8"))


def stream(seed: int, purpose: str, *index: int) -> np.random.Generator:
    """Return an independent generator for ``(seed, purpose, index...)``."""
    if seed < 0 or any(i < 0 for i in index):
        raise ValueError("seed and stream indices must be non-negative")
    ss = np.random.SeedSequence([int(seed), _purpose_key(purpose), *map(int, index)])
    return np.random.Generator(np.random.PCG64(ss))
