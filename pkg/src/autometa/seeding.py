"""Stable seed derivation so every random stream is addressable by name."""
from __future__ import annotations

import hashlib
import json

import numpy as np


def stable_hash(*parts) -> int:
    """64-bit hash of JSON-serialisable parts, stable across processes and runs."""
    blob = json.dumps(parts, separators=(",", ":"), sort_keys=True).encode()
    return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "little")


def rng_for(*parts) -> np.random.Generator:
    return np.random.default_rng(stable_hash(*parts))
