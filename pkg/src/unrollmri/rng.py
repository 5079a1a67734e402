"""Deterministic random-stream derivation.

All randomness in the package flows from integer seeds through named
substreams so that masks, measurement noise, weight init, and shuffling can
be varied independently while staying reproducible across platforms.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.blake2s(str(tag).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def child_seed(seed, *tags) -> int:
    """Derive a 64-bit seed from a parent seed and a tuple of tags.

    Tags may be strings (hashed stably) or integers (used as-is), so
    ``child_seed(s, "mask", i)`` gives one independent stream per sample.
    """
    h = hashlib.blake2s(digest_size=8)
    h.update(int(seed).to_bytes(16, "little", signed=True))
    for tag in tags:
        h.update(_tag_to_int(tag).to_bytes(8, "little"))
    return int.from_bytes(h.digest(), "little")


def substream(seed, *tags) -> np.random.Generator:
    """A Generator seeded by ``child_seed(seed, *tags)``."""
    return np.random.default_rng(child_seed(seed, *tags))
