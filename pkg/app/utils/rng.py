import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def substream(seed: int, *purpose) -> np.random.Generator:
    """Philox (64-bit counter-based) generator for one named purpose of a seed.

    ``substream(7, "landmarks")`` and ``substream(7, "trajectory")`` are
    independent; the same arguments always give the same stream.
    """
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(p) for p in purpose))
    return np.random.Generator(np.random.Philox(seq))
