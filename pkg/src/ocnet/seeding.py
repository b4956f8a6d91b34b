"""Named random sub-streams derived from a single integer seed."""

import zlib

import numpy as np


def stream_key(name):
    return zlib.crc32(name.encode("utf-8"))


def substream(seed, name, *extra):
    """Return a generator keyed by ``(seed, name, *extra)``.

    Streams with different names are statistically independent, and the
    same key always reproduces the same stream on every platform (PCG64).
    """
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, stream_key(name)]
    key.extend(stream_key(e) if isinstance(e, str) else int(e) & 0xFFFFFFFFFFFFFFFF for e in extra)
    return np.random.default_rng(np.random.SeedSequence(key))


def child_seed(rng):
    """Draw a 63-bit seed from ``rng`` for a downstream component."""
    return int(rng.integers(0, 2**63 - 1))
