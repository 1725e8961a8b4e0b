"""Seed derivation shared by every stochastic consumer."""
from __future__ import annotations

import zlib

import numpy as np


def derive_seed(seed: int, *keys: object) -> int:
    """Stable 63-bit child seed for ``(seed, *keys)``.

    Each consumer (init, shuffle, split, corruption, ...) gets its own stream
    so adding draws in one place never perturbs another.
    """
    words = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF]
    for key in keys:
        words.append(zlib.crc32(repr(key).encode("utf-8")))
    state = np.random.SeedSequence(words).generate_state(2, dtype=np.uint32)
    return int(state[0]) | (int(state[1] & 0x7FFFFFFF) << 32)


def rng_for(seed: int, *keys: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *keys))
