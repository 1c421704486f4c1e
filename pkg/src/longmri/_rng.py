import numpy as np


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for ``seed`` and a tuple of integer stream keys.

    Uses ``SeedSequence`` spawn keys so that two call sites with distinct keys
    never share generator state, whatever order they run in.
    """
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))
