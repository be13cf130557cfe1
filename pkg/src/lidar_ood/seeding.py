"""Hierarchical seed derivation.

``derive_seed(master, *parts)`` hashes the master seed and the textual form of
every part with BLAKE2b (8-byte digest, parts joined by a unit-separator byte)
and returns the digest as an unsigned 64-bit integer. Distinct paths such as
``(master, repeat, stage, class)`` therefore get independent seeds, and the
mapping is stable across processes and platforms.
"""

import hashlib

import numpy as np


def derive_seed(master, *parts) -> int:
    h = hashlib.blake2b(digest_size=8, person=b"lidar-ood")
    h.update(str(int(master)).encode())
    for p in parts:
        h.update(b"\x1f")
        h.update(str(p).encode())
    return int.from_bytes(h.digest(), "little")


def derive_rng(master, *parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *parts))
