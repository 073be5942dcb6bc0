"""Deterministic counter-based random streams.

All randomness comes from numpy's Philox bit generator.  A stream is named by
a seed plus a path of string labels, e.g. ``make_rng(7, "train", "epoch3")``,
so components draw from independent streams that do not shift when another
component changes how many numbers it consumes.
"""

import zlib

import numpy as np


def _label_key(label):
    if isinstance(label, (int, np.integer)):
        return int(label)
    return zlib.crc32(str(label).encode("utf-8"))


def make_rng(seed, *labels):
    """Return a ``numpy.random.Generator`` for the stream ``(seed, *labels)``."""
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    ss = np.random.SeedSequence(seed, spawn_key=tuple(_label_key(x) for x in labels))
    return np.random.Generator(np.random.Philox(ss))


def split(rng, n):
    """Split ``rng`` into ``n`` child generators."""
    return rng.spawn(n)
