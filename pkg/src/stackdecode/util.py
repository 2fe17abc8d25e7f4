"""Seeding, hashing and atomic-write helpers shared across modules."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile

import numpy as np

MAX_SEED = 2**63 - 1


def derive_seed(master_seed, *parts):
    """Stable 63-bit seed from a master seed and a cell key.

    Uses sha256 rather than hash() so the mapping is identical across
    processes and interpreter runs.
    """
    key = "|".join([str(int(master_seed))] + [str(p) for p in parts])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & MAX_SEED


def derive_rng(master_seed, *parts):
    return np.random.default_rng(derive_seed(master_seed, *parts))


def canonical_json(obj) -> str:
    """Deterministic JSON encoding (sorted keys, no whitespace drift)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def content_hash(obj) -> str:
    """Git-style sha1 hex digest of an object's canonical JSON."""
    return hashlib.sha1(canonical_json(obj).encode("utf-8")).hexdigest()


def atomic_write_bytes(path, data: bytes):
    """Write a file via temp-then-rename so failures never leave partial output."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))
