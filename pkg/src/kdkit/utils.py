"""Small shared helpers: seeding, edit distance, strict-mode flag."""

from __future__ import annotations

import hashlib
import os
import random

import numpy as np
import torch


def derive_seed(root: int, *parts) -> int:
    """Derive an independent 63-bit seed for one consumer from the root seed.

    Each (root, parts) combination gets its own stream so e.g. model init and
    data shuffling cannot steal draws from each other.
    """
    key = repr((int(root),) + tuple(str(p) for p in parts)).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1


def seed_everything(seed: int) -> None:
    """Seed torch, numpy and random from one root seed (derived streams)."""
    torch.manual_seed(derive_seed(seed, "torch"))
    np.random.seed(derive_seed(seed, "numpy") % (2**32))
    random.seed(derive_seed(seed, "random"))


def strict_mode() -> bool:
    """True when KDKIT_STRICT=1: zero-norm and probability checks raise."""
    return os.environ.get("KDKIT_STRICT", "") == "1"


def edit_distance(a: str, b: str) -> int:
    """Levenshtein distance, used for near-miss suggestions."""
    if a == b:
        return 0
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]
