"""Named random sub-streams derived from one root seed."""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("embedding", "iforest", "augment", "train", "split", "simgen")


def substream_seed(root_seed: int, name: str) -> int:
    """Stable 63-bit seed for the sub-stream ``name``."""
    ss = np.random.SeedSequence([int(root_seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0]) >> 1


def rng(root_seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(substream_seed(root_seed, name))
