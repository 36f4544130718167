"""Seeded counter-based random streams.

Every random draw in polyct goes through ``make_rng(seed)``, a numpy ``Generator`` on the
Philox 4x64 counter-based bit generator. Streams for independent sweep cells are keyed by
``(seed, *labels)`` so a cell's draws never depend on which other cells ran before it.
"""

from __future__ import annotations

import zlib

import numpy as np


def make_rng(seed: int, *labels: str | int) -> np.random.Generator:
    if seed < 0:
        raise ValueError(f"seed must be nonnegative, got {seed}")
    key = [int(seed)]
    for label in labels:
        key.append(zlib.crc32(str(label).encode("utf-8")))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))
