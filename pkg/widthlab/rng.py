"""Reproducible random streams keyed by (seed, purpose, ...) tuples."""
import zlib
from typing import Union

import numpy as np

KeyPart = Union[int, str]


def _entropy(part: KeyPart) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part) & 0xFFFFFFFF


def make_rng(*key: KeyPart) -> np.random.Generator:
    """Generator whose stream depends only on ``key``.

    Example:
        make_rng(seed, "trial", trial, width) gives every (trial, width) cell of
        a sweep its own stream, independent of how cells are scheduled.
    """
    return np.random.default_rng(np.random.SeedSequence([_entropy(part) for part in key]))
