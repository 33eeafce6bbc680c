"""Deterministic derivation of random streams from (seed, key, ...) tuples.

Every random draw in the package goes through these helpers, so a single
user-facing u64 seed fixes all results regardless of execution order.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key(k) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    k = int(k)
    if k < 0:
        raise ValueError(f"seed components must be non-negative, got {k}")
    return k


def stream(seed: int, *keys) -> np.random.Generator:
    """Independent generator for the stream hash(seed, *keys)."""
    return np.random.default_rng(np.random.SeedSequence([_key(seed), *map(_key, keys)]))


def derive_seed(seed: int, *keys) -> int:
    """A u64 seed derived from hash(seed, *keys)."""
    ss = np.random.SeedSequence([_key(seed), *map(_key, keys)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])
