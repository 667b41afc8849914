"""Named random sub-streams derived from a single run seed.

Every consumer of randomness asks for its own stream by name, so adding or
reordering draws in one part of a run leaves the others untouched.
"""
import zlib

import numpy as np


def _name_key(name):
    return zlib.crc32(name.encode("utf-8"))


def substream(seed, name, *keys):
    """Return a ``numpy.random.Generator`` for ``(seed, name, *keys)``."""
    if seed is None:
        raise ValueError("a seed is required")
    spawn_key = (_name_key(name),) + tuple(int(k) for k in keys)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=spawn_key)))
