"""Small shared helpers: deterministic seeding and config hashing."""

from __future__ import annotations

import hashlib
import json
import zlib

import numpy as np


def subkey(name: str) -> int:
    """Stable integer key for a named random stream."""
    return zlib.crc32(name.encode("utf-8"))


def rng_for(seed: int, *keys: int | str) -> np.random.Generator:
    """Generator for an independent, reproducible stream.

    Streams are identified by the run seed plus any number of integer or
    string subkeys, so distinct pipeline stages never share a stream.
    """
    entropy = [int(seed)] + [subkey(k) if isinstance(k, str) else int(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def canonical_json(obj) -> str:
    """JSON with sorted keys and no whitespace, for hashing and digests."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    """Hex digest identifying a fully resolved configuration."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
