"""Deterministic seed derivation so every random draw is reproducible and
resumable from (base seed, role, indices) without shared RNG state."""

import hashlib


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from a tuple of hashable parts."""
    key = "/".join(str(p) for p in parts)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)
