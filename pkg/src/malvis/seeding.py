"""Deterministic seed derivation.

Every random decision in the toolkit draws from a numpy Generator whose
seed is derived from a root seed plus a tuple of string tags (experiment
stage, family name, sample id, ...).  Derivation goes through SHA-256 so
substreams are independent and stable across platforms and call order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts) -> int:
    """Fold (root_seed, tag, tag, ...) into a 64-bit substream seed."""
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))
