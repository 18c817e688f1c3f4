"""Purpose-keyed seed derivation.

All randomness is derived from one integer seed plus a tuple of keys, hashed
with BLAKE2b so results do not depend on ``PYTHONHASHSEED``, worker count, or
processing order.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def stable_hash64(*parts: object) -> int:
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(str(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


def derive_seed(seed: int, *keys: object) -> int:
    return stable_hash64(int(seed) & _MASK64, *keys)


def rng_for(seed: int, *keys: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *keys))
