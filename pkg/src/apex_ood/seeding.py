"""Splittable seeding.

Every random stream is derived from one 64-bit base seed by mixing a stage
identifier and an optional class (or restart) index into a
``numpy.random.SeedSequence`` spawn key. Streams for different stages or
classes never overlap, so per-class work can run in any order.
"""

from __future__ import annotations

import numpy as np

# Stage identifiers. Values are part of the reproducibility contract.
STAGE_SYNTH = 1
STAGE_GMM = 2
STAGE_STRATEGY = 3
STAGE_INIT = 4
STAGE_TRAIN = 5


def derive_rng(seed: int, stage: int, *indices: int) -> np.random.Generator:
    """Return an independent generator for ``(seed, stage, *indices)``."""
    key = (int(stage),) + tuple(int(i) for i in indices)
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=key)
    return np.random.default_rng(ss)
