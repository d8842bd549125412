"""Named, reproducible random-stream derivation.

Every random draw in the package flows from one master seed.  Streams are
derived from ``(master_seed, label, *indices)`` so that any component can be
re-run in isolation and produce the same numbers.
"""

from __future__ import annotations

import zlib

import numpy as np


def _label_key(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


def derive_seed(seed: int, label: str, *index: int) -> np.random.SeedSequence:
    """Return a ``SeedSequence`` unique to ``(seed, label, index...)``."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.SeedSequence([int(seed), _label_key(label), *[int(i) for i in index]])


def derive_rng(seed: int, label: str, *index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, label, *index)))


def as_rng(rng: np.random.Generator | int | None) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)
