"""Deterministic random-stream derivation from a single master seed."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_rng(seed: int, label: str) -> np.random.Generator:
    """Independent, reproducible stream for (seed, purpose label).

    The label is hashed so unrelated purposes never share a stream even
    when they run in a different order.
    """
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, key]))
