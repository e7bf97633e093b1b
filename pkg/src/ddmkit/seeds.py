"""Named substream derivation from a single global seed.

Every stochastic component draws its seed from (global_seed, component name),
so adding or reordering components never perturbs existing streams.
"""

from __future__ import annotations

import hashlib

import numpy as np


def substream_seed(global_seed: int, name: str) -> int:
    """Stable 64-bit seed for the named component stream."""
    digest = hashlib.sha256(f"{global_seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream_rng(global_seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(substream_seed(global_seed, name))
