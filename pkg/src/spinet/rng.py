"""Deterministic random-stream derivation.

All randomness in the package flows from a single integer seed. Independent
streams are derived from (seed, label) pairs so that adding a new consumer
never perturbs existing ones, and so that per-step / per-sample streams can
be recomputed statelessly (required for bit-exact checkpoint resume).
"""

import zlib

import numpy as np


def stream(seed: int, label: str) -> np.random.Generator:
    """Return the PCG64 generator for the given seed and stream label."""
    tag = zlib.crc32(label.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, tag])))


def as_generator(rng_or_seed) -> np.random.Generator:
    """Accept either a Generator or an int seed and return a Generator."""
    if isinstance(rng_or_seed, np.random.Generator):
        return rng_or_seed
    return stream(int(rng_or_seed), "init")
