"""Named, derived random streams.

Every consumer asks for ``derive(seed, "name")`` instead of touching global
state, so adding a new consumer never shifts the numbers another one sees.
Philox is counter-based and its output is platform independent.
"""

import zlib

import numpy as np


def derive(seed: int, name: str) -> np.random.Generator:
    key = zlib.crc32(name.encode("utf-8"))
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, key])
    return np.random.Generator(np.random.Philox(ss))
