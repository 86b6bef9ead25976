"""Hierarchical seeding: one stream per (seed, purpose, step, sample)."""

from __future__ import annotations

import numpy as np

PURPOSES = {
    "init": 1,
    "augment": 2,
    "shuffle": 3,
    "geo": 4,
    "order": 5,
    "sample": 6,
    "probe": 7,
    "eval": 8,
}


def stream(seed: int, purpose: str, step: int = 0, sample: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), PURPOSES[purpose], int(step), int(sample)])


def derived_seed(seed: int, purpose: str, step: int = 0, sample: int = 0) -> int:
    return int(stream(seed, purpose, step, sample).integers(2**62))
