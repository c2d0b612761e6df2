"""Named random substreams derived from a single run seed.

Every source of randomness in a run (design, mcmc, refinement,
observation, ...) pulls its generator from here so that one config seed
reproduces the whole pipeline bit-for-bit.
"""

from __future__ import annotations

import hashlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Generator for the substream ``name`` under the run seed.

    Streams with different names are statistically independent; the same
    (seed, name) pair always yields the same generator state.
    """
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    key = tuple(int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4))
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))
