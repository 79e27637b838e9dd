"""Deterministic seeded RNG streams with hash-based child-stream splitting.

Every source of randomness in the package draws from a named child stream so
that realizations, weight initialization, and data shuffling are reproducible
independently of each other.  Child seeds are derived by hashing the base seed
together with a path of labels, e.g. ``child_seed(seed, "layer", 2, "filter", 7)``.
"""

from __future__ import annotations

import hashlib

import numpy as np

_U64 = (1 << 64) - 1


def child_seed(base_seed: int, *path: int | str) -> int:
    """Derive a stable 64-bit child seed from a base seed and a label path."""
    text = ":".join([str(int(base_seed) & _U64)] + [str(p) for p in path])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(base_seed: int, *path: int | str) -> np.random.Generator:
    """Return the PCG64 generator for the child stream at ``path``.

    With an empty path the base seed itself is used.  Streams for distinct
    paths are statistically independent; the same (seed, path) always yields
    an identical draw sequence.
    """
    seed = child_seed(base_seed, *path) if path else int(base_seed) & _U64
    return np.random.Generator(np.random.PCG64(seed))
