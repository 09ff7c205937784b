import zlib

import numpy as np


def derive_rng(seed: int, *labels: str | int) -> np.random.Generator:
    """Independent generator for ``(seed, labels...)``; stable across runs and platforms."""
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for label in labels:
        words.append(label if isinstance(label, int) else zlib.crc32(label.encode("utf-8")))
    return np.random.default_rng(np.random.SeedSequence(words))
