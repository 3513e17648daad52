"""Reproducible random streams.

All randomness comes from numpy's Philox counter-based generator keyed by
a :class:`numpy.random.SeedSequence`. Sub-streams are derived with spawn
keys, so per-vertex draws do not depend on iteration order and reproduce
across platforms.
"""

from __future__ import annotations

import numpy as np

RNG_NAME = "philox4x64-10+seedsequence/v1"


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``seed`` and a tuple of integer keys."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def complex_normal(rng: np.random.Generator, shape) -> np.ndarray:
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def haar_unitary(rng: np.random.Generator, n: int) -> np.ndarray:
    """Haar-distributed ``n x n`` unitary (QR with phase correction)."""
    q, r = np.linalg.qr(complex_normal(rng, (n, n)))
    ph = np.diag(r) / np.abs(np.diag(r))
    return q * ph


def random_isometry(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """``rows x cols`` matrix with orthonormal columns (rows >= cols)."""
    q, r = np.linalg.qr(complex_normal(rng, (rows, cols)))
    ph = np.diag(r) / np.abs(np.diag(r))
    return q * ph
