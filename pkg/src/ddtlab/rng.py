"""Seed-derived random streams.

Every source of randomness in the package is a named substream of one
master seed, so each component (dataset build, per-step noise, probe
batches, sampling noise) is independently reproducible. Streams named
with a step suffix ("noise/123") make training resumable bit-exactly.
"""

from __future__ import annotations

import hashlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Return a generator for the (seed, name) pair.

    Stable across runs and platforms: the name is hashed into extra
    SeedSequence entropy rather than relying on Python's salted hash().
    """
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed), key]))


def step_stream(seed: int, name: str, step: int) -> np.random.Generator:
    """Substream for one training/sampling step."""
    return substream(seed, f"{name}/{step}")
