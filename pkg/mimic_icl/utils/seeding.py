"""
Named random sub-streams derived from one root seed.
"""

import zlib

import numpy as np

STREAMS = ("init", "pretrain", "train", "eval", "task", "validation", "verify")


def substream(root_seed: int, name: str) -> np.random.Generator:
    """Generator seeded from (root_seed, crc32(name)); independent of call order."""
    return np.random.default_rng([int(root_seed), zlib.crc32(name.encode())])


def substream_seed(root_seed: int, name: str) -> int:
    return int(substream(root_seed, name).integers(1 << 31))
