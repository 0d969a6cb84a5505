"""Named, order-independent random streams derived from one global seed.

A stream is ``PCG64(SeedSequence([seed, k1, k2, ...]))`` where string keys are
mapped to the first 8 bytes (little endian) of their SHA-256 digest.  Because
every consumer derives its own stream from a fixed key path, results do not
depend on the order in which clients or arms happen to run.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key(k) -> int:
    if isinstance(k, (bool, np.bool_)):
        raise TypeError("boolean stream keys are ambiguous")
    if isinstance(k, (int, np.integer)):
        if k < 0:
            raise ValueError("stream keys must be non-negative")
        return int(k)
    if isinstance(k, str):
        return int.from_bytes(hashlib.sha256(k.encode()).digest()[:8], "little")
    raise TypeError(f"unsupported stream key {k!r}")


def stream(seed: int, *keys) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([_key(seed), *map(_key, keys)])))


def as_generator(rng) -> np.random.Generator:
    """Accept an int seed or an existing Generator."""
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
