"""Deterministic random-number streams.

Every source of randomness in the package is a Philox counter-based
generator keyed by (experiment seed, purpose tags). Philox has fixed,
documented round constants, so identical (seed, tags) pairs reproduce
identical streams on every platform, independent of call order or
thread scheduling.
"""

import hashlib

import numpy as np


def rng_for(seed: int, *tags) -> np.random.Generator:
    """Return the generator for one purpose within one experiment.

    The 128-bit Philox key is derived by hashing the seed together with
    the purpose tags (e.g. ``rng_for(seed, "batch", client_id, round)``),
    so streams for different purposes never overlap and no global RNG
    state exists anywhere.
    """
    msg = str(int(seed)).encode() + b"|" + "|".join(str(t) for t in tags).encode()
    digest = hashlib.blake2b(msg, digest_size=16).digest()
    key = np.frombuffer(digest, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
