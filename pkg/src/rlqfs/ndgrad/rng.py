"""Seeded, splittable randomness threaded explicitly through stochastic ops."""

from __future__ import annotations

import hashlib
import json
from typing import List

import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def _stable_key(x) -> int:
    # process-independent, unlike builtin hash()
    return int.from_bytes(hashlib.sha256(str(x).encode()).digest()[:4], "little")


def derive_rng(seed: int, *labels) -> np.random.Generator:
    """Independent stream for a named purpose (e.g. per-epoch shuffles)."""
    key = [seed] + [_stable_key(x) for x in labels]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


def split_rng(rng: np.random.Generator, n: int) -> List[np.random.Generator]:
    return rng.spawn(n)


def rng_state(rng: np.random.Generator) -> str:
    return json.dumps(rng.bit_generator.state, sort_keys=True)


def restore_rng(state: str) -> np.random.Generator:
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = json.loads(state)
    return rng
