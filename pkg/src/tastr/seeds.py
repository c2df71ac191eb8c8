"""Named RNG streams expanded from one root seed."""

import zlib

import numpy as np


def stream_seed(root: int, name: str) -> list[int]:
    return [int(root), zlib.crc32(name.encode("utf-8"))]


def stream(root: int, name: str) -> np.random.Generator:
    """Independent generator for component ``name``; same (root, name) -> same stream."""
    return np.random.default_rng(np.random.SeedSequence(stream_seed(root, name)))
