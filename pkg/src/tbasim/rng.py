"""Seeded random streams.

Every stream is a Philox-4x64 counter-based generator keyed by a numpy
``SeedSequence`` built from a base seed and a tuple of integer keys, so any
(seed, keys) pair names one reproducible stream regardless of call order.
"""

from __future__ import annotations

import numpy as np

# Keys used to separate streams that share a (seed, frame) prefix.
DETECTION_STREAM = 1_000_003
SCENE_STREAM = 1_000_033
SHUFFLE_STREAM = 1_000_037
SAMPLER_STREAM = 1_000_039


def substream(seed: int, *keys: int) -> np.random.Generator:
    """Return the generator for ``(seed, *keys)``."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(k) & 0xFFFFFFFFFFFFFFFF for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *keys: int) -> int:
    """A 63-bit integer seed derived from ``(seed, *keys)``."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(k) & 0xFFFFFFFFFFFFFFFF for k in keys]
    state = np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1])) & 0x7FFFFFFFFFFFFFFF
