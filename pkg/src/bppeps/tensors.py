"""Dense complex tensor helpers: contraction, matricization, SVD and norms.

Tensors are plain :class:`numpy.ndarray` objects. Every helper that does
arithmetic accepts an optional :class:`MultiplyCounter` so that callers can
account for the number of scalar multiplications they perform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "HERMITIAN_TOL",
    "MultiplyCounter",
    "contract",
    "contract_cost",
    "matricize",
    "svd",
    "schatten_norm",
    "trace_norm_hermitian",
    "hermitian_part",
    "tensor_to_json",
    "tensor_from_json",
]

HERMITIAN_TOL = 1e-10


@dataclass
class MultiplyCounter:
    """Running total of scalar multiplications."""

    count: int = 0

    def add(self, n: int) -> None:
        self.count += int(n)


def contract_cost(
    a_shape: Sequence[int], b_shape: Sequence[int], pairs: Sequence[tuple[int, int]]
) -> int:
    """Number of scalar multiplications of a pairwise contraction."""
    paired_a = {i for i, _ in pairs}
    paired_b = {j for _, j in pairs}
    free_a = math.prod(d for i, d in enumerate(a_shape) if i not in paired_a)
    free_b = math.prod(d for j, d in enumerate(b_shape) if j not in paired_b)
    summed = math.prod(a_shape[i] for i, _ in pairs)
    return free_a * free_b * summed


def contract(
    a: np.ndarray,
    b: np.ndarray,
    pairs: Sequence[tuple[int, int]] = (),
    counter: MultiplyCounter | None = None,
) -> np.ndarray:
    """Sum over paired legs of ``a`` and ``b``.

    The result carries the free legs of ``a`` followed by those of ``b``,
    each in their original order.

    Raises
    ------
    ValueError
        If a paired leg has mismatched dimensions.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    for i, j in pairs:
        if a.shape[i] != b.shape[j]:
            raise ValueError(
                f"cannot pair leg {i} of a (dim {a.shape[i]}) with "
                f"leg {j} of b (dim {b.shape[j]})"
            )
    if counter is not None:
        counter.add(contract_cost(a.shape, b.shape, pairs))
    ax_a = [i for i, _ in pairs]
    ax_b = [j for _, j in pairs]
    return np.tensordot(a, b, axes=(ax_a, ax_b))


def matricize(t: np.ndarray, row_legs: Iterable[int]) -> np.ndarray:
    """Group ``row_legs`` (in the given order) into rows, the rest into columns."""
    t = np.asarray(t)
    rows = list(row_legs)
    cols = [i for i in range(t.ndim) if i not in rows]
    nr = math.prod(t.shape[i] for i in rows)
    return np.transpose(t, rows + cols).reshape(nr, -1)


def svd(m: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD ``m = V @ diag(s) @ Uh`` with ``s`` descending.

    Returns
    -------
    s, V, Uh : ndarray
        Singular values, left factor with orthonormal columns and right
        factor with orthonormal rows.

    Raises
    ------
    ValueError
        On non-finite input.
    numpy.linalg.LinAlgError
        If the underlying LAPACK routine fails to converge.
    """
    m = np.asarray(m)
    if not np.all(np.isfinite(m)):
        raise ValueError("svd input contains non-finite entries")
    V, s, Uh = np.linalg.svd(m, full_matrices=False)
    return s, V, Uh


def schatten_norm(m: np.ndarray, p: float) -> float:
    """Schatten ``p``-norm for ``p`` in {1, 2, inf}."""
    m = np.asarray(m)
    if p == 2:
        return float(np.linalg.norm(m))
    s = np.linalg.svd(m, compute_uv=False)
    if p == 1:
        return float(s.sum())
    if p == np.inf:
        return float(s.max(initial=0.0))
    raise ValueError(f"unsupported Schatten index {p!r}")


def trace_norm_hermitian(m: np.ndarray) -> np.ndarray:
    """Trace norm of (a batch of) Hermitian matrices via their eigenvalues."""
    return np.abs(np.linalg.eigvalsh(m)).sum(axis=-1)


def hermitian_part(m: np.ndarray) -> np.ndarray:
    """``(M + M^dagger) / 2`` over the last two axes."""
    return 0.5 * (m + np.conj(np.swapaxes(m, -1, -2)))


def tensor_to_json(t: np.ndarray) -> dict:
    """Row-major ``{"shape", "data": [[re, im], ...]}`` encoding.

    Python floats serialize with shortest round-trip repr, so decoding
    reproduces the original bits exactly.
    """
    t = np.asarray(t, dtype=complex)
    flat = t.reshape(-1)
    return {
        "shape": list(t.shape),
        "data": [[float(z.real), float(z.imag)] for z in flat],
    }


def tensor_from_json(obj: dict) -> np.ndarray:
    shape = tuple(int(s) for s in obj["shape"])
    data = np.asarray(obj["data"], dtype=float).reshape(-1, 2)
    if data.shape[0] != math.prod(shape):
        raise ValueError("entry count does not match shape")
    out = (data[:, 0] + 1j * data[:, 1]).reshape(shape)
    if not np.all(np.isfinite(out)):
        raise ValueError("tensor contains non-finite entries")
    return out
