"""Seeded random streams.

All randomness goes through numpy's PCG64 bit generator, whose output for a
given seed is fixed across platforms.
"""
import hashlib

import numpy as np


def make_rng(seed):
    return np.random.Generator(np.random.PCG64(int(seed)))


def hash64(seed, key):
    """Stable 64-bit digest of ``(seed, key)``; independent of PYTHONHASHSEED."""
    h = hashlib.blake2b(f"{int(seed)}\x1f{key}".encode("utf-8"), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def derive(seed, *keys):
    return make_rng(hash64(seed, "/".join(str(k) for k in keys)))
