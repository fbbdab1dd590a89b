"""Stable seed derivation.

Seeds for per-item randomness are derived by hashing the item's identity
together with a base seed, so adding or removing items never reshuffles
the others.
"""

import hashlib

import numpy as np


def stable_seed(*parts) -> int:
    """64-bit seed from BLAKE2b over the ``repr`` of each part, joined by NUL."""
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        h.update(repr(part).encode("utf-8"))
        h.update(b"\0")
    return int.from_bytes(h.digest(), "little")


def rng_for(*parts) -> np.random.Generator:
    return np.random.default_rng(stable_seed(*parts))
