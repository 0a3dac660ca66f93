"""Counter-based random streams.

All randomness goes through numpy's Philox4x64 generator. A stream is
addressed by ``(seed, *path)``: the 64-bit seed is the Philox key and up to
three path integers fill counter words 1..3 (word 0 is the running block
counter). Different paths therefore never overlap unless a single stream
draws more than 2**64 blocks, and any stream can be regenerated on its own,
independent of the order in which streams are consumed.
"""

import numpy as np

MASK64 = (1 << 64) - 1

# path tags (first path word) used by the package
TAG_DATA = 1
TAG_FOLDS = 2
TAG_BOOT = 3


def stream(seed: int, *path: int) -> np.random.Generator:
    if len(path) > 3:
        raise ValueError("at most three path words")
    counter = [0] + [int(p) & MASK64 for p in path] + [0] * (3 - len(path))
    return np.random.Generator(np.random.Philox(key=int(seed) & MASK64, counter=counter))
