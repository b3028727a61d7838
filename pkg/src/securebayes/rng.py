"""Named, independent random streams derived from one experiment seed."""
from __future__ import annotations

import hashlib

import numpy as np


def _key(parts) -> list[int]:
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def stream(seed: int, *role) -> np.random.Generator:
    """Generator for ``role`` (e.g. ``("site", 2, "batch")``) under ``seed``.

    Distinct roles give statistically independent streams; the same pair always
    reproduces the same stream.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *_key(role)]))


def child_seed(seed: int, *role) -> int:
    return int(stream(seed, *role).integers(0, 2**31 - 1))
