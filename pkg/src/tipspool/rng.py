"""Deterministic random streams.

All randomness flows through numpy's Philox generator, a 64-bit
counter-based PRNG whose output is identical across platforms. Each
purpose (data generation, weight init, undo shifts, ...) gets its own
stream keyed by (seed, purpose, salt), so adding draws to one purpose
never perturbs another.
"""

import numpy as np

DATA, INIT, TRAIN_SHIFTS, EVAL_SHIFTS, PATCHES, BATCH, SPLIT = range(7)


def stream(seed, purpose, salt=0):
    """An independent Generator for one (seed, purpose, salt) triple."""
    if not (0 <= salt < 2 ** 32):
        raise ValueError(f"salt must fit in 32 bits, got {salt}")
    key = np.array([np.uint64(seed), np.uint64((purpose << 32) | salt)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
