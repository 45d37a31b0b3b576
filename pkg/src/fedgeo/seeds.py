"""Stable seed derivation so every random stream is a pure function of the master seed."""
from __future__ import annotations

import hashlib


def derive_seed(master: int, *tags: object) -> int:
    """Derive a 63-bit child seed from a master seed and a tag tuple.

    Uses blake2b over the repr of the inputs, so identical (master, tags)
    always yield the same seed across processes and platforms.
    """
    payload = repr((int(master), tags)).encode("utf-8")
    digest = hashlib.blake2b(payload, digest_size=8).digest()
    return int.from_bytes(digest, "little") & 0x7FFF_FFFF_FFFF_FFFF
