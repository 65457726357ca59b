"""Named random sub-streams derived from one root seed."""

import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for ``name`` (e.g. "data", "init", "dropout", "shuffle")."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])
