"""Deterministic seed derivation.

All randomness in a run flows from one master seed. Components that need their
own stream derive a sub-seed from (master seed, label) so that adding or
reordering consumers never perturbs another component's stream.
"""

from __future__ import annotations

import hashlib


def subseed(seed: int, label: str) -> int:
    """Derive a stable 63-bit sub-seed from a master seed and a stream label."""
    payload = f"{seed}:{label}".encode("utf-8")
    digest = hashlib.blake2b(payload, digest_size=8).digest()
    return int.from_bytes(digest, "little") & (2**63 - 1)
