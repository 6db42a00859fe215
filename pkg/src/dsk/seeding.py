"""Deterministic RNG derivation from a single master seed.

Every stage and worker derives its generator by hashing
(master seed, *path components); no global RNG state exists anywhere in
the package.
"""

from __future__ import annotations

import hashlib

import numpy as np


def child_seed(master: int, *path) -> int:
    text = ":".join([str(int(master))] + [str(p) for p in path])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(master: int, *path) -> np.random.Generator:
    return np.random.default_rng(child_seed(master, *path))
