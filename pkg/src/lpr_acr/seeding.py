"""Named random sub-streams derived from one root seed."""

import zlib

import numpy as np


def substream_seed(root: int, *names) -> np.random.SeedSequence:
    keys = [int(root) & 0xFFFFFFFF] + [zlib.crc32(str(n).encode("utf-8")) for n in names]
    return np.random.SeedSequence(keys)


def substream(root: int, *names) -> np.random.Generator:
    """Generator for ``names`` under ``root``; same inputs give the same stream."""
    return np.random.default_rng(substream_seed(root, *names))


def substream_int(root: int, *names) -> int:
    return int(substream_seed(root, *names).generate_state(1)[0])
