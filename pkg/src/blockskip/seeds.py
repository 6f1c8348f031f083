"""Deterministic named random streams.

Every piece of randomness in a run flows from one root seed through a named
stream, so two runs differing in a single factor share all other draws.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Generator for the sub-stream ``name`` of the root ``seed``."""
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest()
    salt = int.from_bytes(digest, "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**63 - 1), salt]))
