"""Named random streams derived from a single root seed."""

from __future__ import annotations

import zlib

import numpy as np


def stream(root: int, name: str, *index: int) -> np.random.Generator:
    """Independent generator for (root, name, index...).

    Components draw from their own named stream so re-seeding one (say, field
    initialisation) leaves every other stream untouched.
    """
    key = [int(root), zlib.crc32(name.encode())] + [int(i) for i in index]
    return np.random.default_rng(np.random.SeedSequence(key))
