"""Counter-based seed splitting.

Every random stream is keyed by the master seed plus a tuple of labels
(strings or ints).  Labels are hashed with BLAKE2b into a 64-bit spawn key,
so the seed for e.g. ``("protect", 3, "ours")`` never depends on how many
other streams were drawn before it.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _label_key(labels) -> tuple[int, ...]:
    h = hashlib.blake2b(repr(tuple(labels)).encode("utf-8"), digest_size=16).digest()
    return tuple(int.from_bytes(h[i:i + 4], "little") for i in range(0, 16, 4))


def seed_sequence(master: int, *labels) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(master), spawn_key=_label_key(labels))


def derive_seed(master: int, *labels) -> int:
    """A 63-bit integer seed for the stream named by ``labels``."""
    return int(seed_sequence(master, *labels).generate_state(1, np.uint64)[0] >> np.uint64(1))


def derive_rng(master: int, *labels) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(master, *labels))
