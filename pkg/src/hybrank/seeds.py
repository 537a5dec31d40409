"""Deterministic RNG substreams.

Every random decision in the package flows from one integer seed through a
named substream, so that components never share or race on generator state.
Stream names are hashed with blake2s (stable across processes and platforms,
unlike the builtin ``hash``).
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key(token: object) -> int:
    digest = hashlib.blake2s(str(token).encode("utf-8"), digest_size=4).digest()
    return int.from_bytes(digest, "big")


def substream(seed: int, *names: object) -> np.random.Generator:
    """Return a generator for the substream identified by ``names``.

    The same (seed, names) pair always yields an identical generator, and
    distinct name tuples yield statistically independent streams.
    """
    spawn_key = tuple(_key(n) for n in names)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=spawn_key))


def subseed(seed: int, *names: object) -> int:
    """Collapse a named substream to a single integer seed.

    Handy when an API takes a plain ``seed`` argument (dropout masks,
    per-session click draws) but the caller wants substream discipline.
    """
    return int(substream(seed, *names).integers(0, 2**63 - 1))
