"""Named sub-seeds derived from one root seed."""

from __future__ import annotations

import zlib

import numpy as np


def sub_seed(root: int, *names: str | int) -> np.random.SeedSequence:
    key = tuple(zlib.crc32(str(n).encode("utf-8")) for n in names)
    return np.random.SeedSequence(entropy=int(root), spawn_key=key)


def rng_for(root: int, *names: str | int) -> np.random.Generator:
    """Independent generator for the consumer identified by ``names``."""
    return np.random.default_rng(sub_seed(root, *names))


def as_rng(seed_or_rng: int | np.random.Generator | None) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)
