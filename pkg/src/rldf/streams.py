"""Deterministic random substreams derived from one master seed.

A stream is named by ``(seed, *labels)``.  Labels are hashed with BLAKE2b into
32-bit words that become the ``spawn_key`` of a numpy ``SeedSequence``; the
stream is a PCG64 generator over that sequence.  Equal names give equal
streams, on any machine.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _words(label) -> tuple[int, ...]:
    digest = hashlib.blake2b(repr(label).encode(), digest_size=8).digest()
    return (int.from_bytes(digest[:4], "little"), int.from_bytes(digest[4:], "little"))


def seed_sequence(seed: int, *labels) -> np.random.SeedSequence:
    key: tuple[int, ...] = ()
    for lab in labels:
        key += _words(lab)
    return np.random.SeedSequence(entropy=int(seed) % 2**64, spawn_key=key)


def substream(seed: int, *labels) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *labels)))


def subseed(seed: int, *labels) -> int:
    return int(seed_sequence(seed, *labels).generate_state(2, np.uint32).view(np.uint64)[0] >> 1)
