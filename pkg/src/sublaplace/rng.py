"""Deterministic random-number streams.

Every source of randomness in the package flows through :func:`derive_rng`:
a counter-based Philox generator keyed by a user seed plus a tuple of string
tags naming the purpose ("init", "shuffle", "mask", ...). Two calls with the
same (seed, tags) always yield identical streams, and streams with different
tags are statistically independent, so pipeline stages can be re-run or
reordered without perturbing each other.
"""

import hashlib

import numpy as np


def _tag_to_int(tag: str) -> int:
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(seed: int, *tags: str) -> np.random.Generator:
    """Return a Philox generator keyed by ``seed`` and purpose ``tags``."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_tag_to_int(t) for t in tags]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
