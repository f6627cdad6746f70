"""Named random substreams so one --seed reproduces every draw.

Each consumer (init, training noise, data generation, sampling) gets its
own generator keyed by (seed, purpose name); streams stay independent and
platform-stable.
"""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF,
                                  zlib.crc32(name.encode("utf-8"))])
