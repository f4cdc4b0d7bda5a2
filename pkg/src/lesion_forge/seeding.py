"""Deterministic seed derivation for parallel-safe generation."""

from __future__ import annotations

import hashlib


def derive_seed(master_seed: int, *parts: object) -> int:
    """Mix a master seed with context parts into a stable 64-bit seed."""
    text = f"{master_seed}|" + "|".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode()).digest()
    return int.from_bytes(digest[:8], "big")


def hash_unit(master_seed: int, *parts: object) -> float:
    """Deterministic value in [0, 1) from the same mixing scheme."""
    return derive_seed(master_seed, *parts) / 2**64
