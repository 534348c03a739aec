import zlib

import numpy as np


def derive_seed(seed: int, label: str) -> int:
    """Stable per-purpose seed, so model init and shuffling never share a stream."""
    sequence = np.random.SeedSequence([seed, zlib.crc32(label.encode("utf-8"))])
    return int(sequence.generate_state(1)[0])
