"""One root seed, many named deterministic sub-streams."""
from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator derived from (seed, name); stable across runs."""
    tag = zlib.crc32(name.encode())
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag]))
