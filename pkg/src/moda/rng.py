"""Named, reproducible random streams derived from one integer seed.

Every consumer asks for its own stream by name, so adding a new consumer
never shifts the numbers another one sees. Streams use the counter-based
Philox generator.
"""
import zlib

import numpy as np


def derive(seed, *names):
    """Generator for the stream ``names`` under ``seed``."""
    key = tuple(zlib.crc32(str(n).encode()) for n in names)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))
