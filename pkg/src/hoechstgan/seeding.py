"""Deterministic derivation of named RNG streams from one root seed.

Every stochastic subsystem (data order, weight init, dropout noise, split
assignment, ablation noise) pulls its seed from the root through a stable
hash, so streams stay independent and runs reproduce bitwise.
"""
from __future__ import annotations

import hashlib


def derive_seed(root_seed: int, stream: str) -> int:
    """Maps (root_seed, stream name) to a stable non-negative 63-bit seed."""
    digest = hashlib.sha256(f"{int(root_seed)}:{stream}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)
