"""Shared helpers: stable hashing and canonical JSON rendering."""

from __future__ import annotations

import hashlib
import json
from typing import Any


def stable_hash64(*parts: str) -> int:
    """Hash strings to an unsigned 64-bit integer.

    Stable across processes, platforms, and Python versions (unlike the
    built-in ``hash``, which is salted per process).
    """
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        h.update(part.encode("utf-8"))
        h.update(b"\x1f")  # field separator: ("ab", "c") must differ from ("a", "bc")
    return int.from_bytes(h.digest(), "little")


def canonical_json(obj: Any) -> str:
    """Deterministic JSON rendering, used for config hashing."""
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
