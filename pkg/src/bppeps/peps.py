"""PEPS site tensors, injectivity, random ensembles and virtual superoperators.

Conventions
-----------
A site tensor ``T_v`` has shape ``(d, D, ..., D)``: the physical leg first,
then one virtual leg per neighbor in ascending neighbor order. Its
matricization ``T_v : C^{D^k} -> C^d`` factors as ``V diag(lam) U^dagger``.

The double layer ``E_v = T_v^dagger O T_v`` is indexed ``[bra, ket]`` on the
virtual multi-index. In the *doubled* form used by message passing, each
virtual leg pair ``(bra, ket)`` is fused into one leg of size ``D**2`` with
index ``bra * D + ket``, matching a row-major flattened ``D x D`` message.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping

import numpy as np

from . import rng as _rng
from .errors import InfeasibleError
from .graph import Graph
from .tensors import matricize, svd, tensor_from_json, tensor_to_json

__all__ = [
    "PepsNetwork",
    "InjectivityReport",
    "Perturbation",
    "VirtualSuperoperator",
    "measure_injectivity",
    "generate_random_peps",
    "perturb_site",
    "build_superoperator",
    "stability_margin",
    "double_layer",
]


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=complex, copy=True)
    a.setflags(write=False)
    return a


def double_layer(t: np.ndarray, D: int, op: np.ndarray | None = None) -> np.ndarray:
    """Doubled-leg form of ``T^dagger O T`` for one site tensor.

    The identity is used when ``op`` is None, going through exactly the same
    arithmetic, so an explicit identity insertion reproduces the undressed
    tensor bit for bit.
    """
    d = t.shape[0]
    k = t.ndim - 1
    m = t.reshape(d, -1)
    if op is None:
        op = np.eye(d)
    e = m.conj().T @ (np.asarray(op) @ m)
    e = e.reshape((D,) * (2 * k))
    perm = [ax for i in range(k) for ax in (i, k + i)]
    return np.ascontiguousarray(e.transpose(perm)).reshape((D * D,) * k)


@dataclass(frozen=True, eq=False)
class PepsNetwork:
    """Immutable PEPS on a graph.

    Parameters
    ----------
    graph : Graph
    bond_dim : int
        Virtual dimension ``D``.
    phys_dim : int
        Physical dimension ``d``.
    tensors : sequence of ndarray
        One site tensor per vertex, shape ``(d,) + (D,) * deg(v)``.
    """

    graph: Graph
    bond_dim: int
    phys_dim: int
    tensors: tuple[np.ndarray, ...] = field(repr=False)

    def __post_init__(self):
        g, D, d = self.graph, self.bond_dim, self.phys_dim
        if len(self.tensors) != g.n:
            raise InfeasibleError("need exactly one tensor per vertex")
        ts = []
        for v, t in enumerate(self.tensors):
            shape = (d,) + (D,) * g.degree(v)
            if tuple(np.shape(t)) != shape:
                raise InfeasibleError(
                    f"tensor at vertex {v} has shape {np.shape(t)}, expected {shape}"
                )
            ts.append(_frozen(t))
        object.__setattr__(self, "tensors", tuple(ts))

    @cached_property
    def double_layers(self) -> tuple[np.ndarray, ...]:
        """Undressed doubled-leg double layers, one per vertex."""
        return tuple(double_layer(t, self.bond_dim) for t in self.tensors)

    def dressed_double_layer(self, v: int, op: np.ndarray | None) -> np.ndarray:
        if op is None:
            return self.double_layers[v]
        return double_layer(self.tensors[v], self.bond_dim, op)

    def replace(self, new: Mapping[int, np.ndarray]) -> "PepsNetwork":
        """Copy with some site tensors swapped out (others shared)."""
        ts = list(self.tensors)
        for v, t in new.items():
            ts[v] = t
        return PepsNetwork(self.graph, self.bond_dim, self.phys_dim, tuple(ts))

    def to_json(self) -> dict:
        return {
            "graph": self.graph.to_json(),
            "bond_dim": self.bond_dim,
            "phys_dim": self.phys_dim,
            "tensors": {str(v): tensor_to_json(t) for v, t in enumerate(self.tensors)},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PepsNetwork":
        g = Graph.from_json(obj["graph"])
        ts = tuple(tensor_from_json(obj["tensors"][str(v)]) for v in range(g.n))
        return cls(g, int(obj["bond_dim"]), int(obj["phys_dim"]), ts)


# ---------------------------------------------------------------------- #
# injectivity
# ---------------------------------------------------------------------- #


@dataclass(frozen=True)
class InjectivityReport:
    """Normalized singular spectra and injectivity parameters."""

    singular_values: tuple[np.ndarray, ...]
    delta_v: tuple[float, ...]
    delta: float
    epsilon: float

    @property
    def injective(self) -> bool:
        return self.delta > 0

    def to_json(self) -> dict:
        return {
            "delta_v": list(self.delta_v),
            "delta": self.delta,
            "epsilon": self.epsilon,
            "injective": self.injective,
        }


def _site_spectrum(t: np.ndarray, D: int) -> np.ndarray:
    d = t.shape[0]
    k = t.ndim - 1
    if d < D**k:
        raise InfeasibleError(
            f"physical dimension {d} is below D^deg = {D ** k}; tensor cannot be injective"
        )
    s, _, _ = svd(t.reshape(d, -1))
    return s


def measure_injectivity(p: PepsNetwork) -> InjectivityReport:
    """Per-vertex singular values normalized to ``lam_max = 1``."""
    spectra, deltas = [], []
    for t in p.tensors:
        s = _site_spectrum(t, p.bond_dim)
        top = s[0] if s.size and s[0] > 0 else 1.0
        s = np.clip(s / top, 0.0, 1.0)
        spectra.append(s)
        # a vanishing singular value means a nontrivial kernel
        dv = float(s[-1]) if s[-1] > 1e-14 else 0.0
        deltas.append(dv)
    delta = min(deltas)
    return InjectivityReport(
        singular_values=tuple(spectra),
        delta_v=tuple(deltas),
        delta=delta,
        epsilon=1.0 - delta * delta,
    )


def generate_random_peps(
    g: Graph,
    bond_dim: int,
    seed: int,
    epsilon: float,
    phys_dim: int | None = None,
) -> PepsNetwork:
    """Random PEPS with a pinned injectivity parameter.

    Each site tensor is ``V diag(lam) U^dagger`` with ``U`` Haar unitary,
    ``V`` a random isometry, ``lam[0] = 1``, ``lam[-1] = sqrt(1 - epsilon)``
    and the interior values uniform in between.

    Parameters
    ----------
    g : Graph
    bond_dim : int
    seed : int
    epsilon : float
        Target ``1 - delta**2`` in ``[0, 1)``.
    phys_dim : int, optional
        Defaults to ``D ** max_degree``.
    """
    if not 0.0 <= epsilon < 1.0:
        raise InfeasibleError("epsilon must lie in [0, 1)")
    D = int(bond_dim)
    if D < 1:
        raise InfeasibleError("bond dimension must be positive")
    d = D**g.max_degree if phys_dim is None else int(phys_dim)
    lam_min = math.sqrt(1.0 - epsilon)
    tensors = []
    for v in range(g.n):
        k = g.degree(v)
        n = D**k
        if d < n:
            raise InfeasibleError(
                f"vertex {v}: physical dimension {d} < D^deg = {n}"
            )
        gen = _rng.stream(seed, 0, v)
        u = _rng.haar_unitary(gen, n)
        iso = _rng.random_isometry(gen, d, n)
        if n == 1:
            lam = np.ones(1)
        else:
            interior = gen.uniform(lam_min, 1.0, size=n - 2)
            lam = np.concatenate([[1.0], np.sort(interior)[::-1], [lam_min]])
        m = (iso * lam) @ u.conj().T
        tensors.append(m.reshape((d,) + (D,) * k))
    return PepsNetwork(g, D, d, tuple(tensors))


# ---------------------------------------------------------------------- #
# perturbations
# ---------------------------------------------------------------------- #


def stability_margin(delta_v: float, max_degree: int) -> float:
    """Largest perturbation strength that provably keeps ``eps' < eps_star``.

    With ``delta_th = sqrt(1 - eps_star)``, a perturbation of spectral norm
    ``s`` followed by renormalization leaves the smallest normalized
    singular value at least ``(delta_v - s) / (1 + s)``, which stays above
    ``delta_th`` iff ``s < (delta_v - delta_th) / (1 + delta_th)``. The
    result is negative when the vertex already violates the threshold.
    """
    eps_star = 1.0 / (2 * max_degree - 1)
    dth = math.sqrt(1.0 - eps_star)
    return (delta_v - dth) / (1.0 + dth)


@dataclass(frozen=True)
class Perturbation:
    """Result of :func:`perturb_site`.

    Attributes
    ----------
    network : PepsNetwork
    strength : float
    rescale : dict
        Per perturbed vertex, the factor applied to restore ``lam_max = 1``.
    max_shift : dict
        Per perturbed vertex, ``max_i |sigma_i(T + E) - sigma_i(T)|``
        measured before renormalization.
    """

    network: PepsNetwork
    strength: float
    rescale: dict
    max_shift: dict


def perturb_site(
    p: PepsNetwork, region: Iterable[int], strength: float, seed: int
) -> Perturbation:
    """Add a random tensor of spectral norm ``strength`` on each vertex of the region.

    Untouched vertices keep their (shared, read-only) arrays, and a zero
    strength returns the network unchanged.
    """
    region = sorted(set(region))
    if not region:
        raise ValueError("perturbation region must be nonempty")
    if strength < 0:
        raise ValueError("strength must be nonnegative")
    if strength == 0:
        return Perturbation(p, 0.0, {v: 1.0 for v in region}, {v: 0.0 for v in region})
    new, rescale, shift = {}, {}, {}
    for v in region:
        t = p.tensors[v]
        m = t.reshape(t.shape[0], -1)
        gen = _rng.stream(seed, 1, v)
        e = _rng.complex_normal(gen, m.shape)
        e *= strength / np.linalg.norm(e, 2)
        m2 = m + e
        s_old = svd(m)[0]
        s_new = svd(m2)[0]
        shift[v] = float(np.max(np.abs(s_new - s_old)))
        rescale[v] = float(1.0 / s_new[0])
        new[v] = (m2 * rescale[v]).reshape(t.shape)
    return Perturbation(p.replace(new), float(strength), rescale, shift)


# ---------------------------------------------------------------------- #
# virtual superoperators
# ---------------------------------------------------------------------- #


@dataclass(frozen=True)
class VirtualSuperoperator:
    """Channel from the incoming virtual legs of ``v`` to the leg facing ``n``.

    ``kraus[a]`` maps ``C^{D^(k-1)}`` (other legs, ascending neighbor order)
    to ``C^D``. The channel is ``X -> sum_a weights[a] K_a X K_a^dagger``.
    """

    vertex: int
    out_neighbor: int
    kraus: np.ndarray
    weights: np.ndarray

    @property
    def dim_out(self) -> int:
        return self.kraus.shape[1]

    @property
    def dim_in(self) -> int:
        return self.kraus.shape[2]

    def apply(self, x: np.ndarray) -> np.ndarray:
        k = self.kraus
        return np.einsum("a,acl,lm,adm->cd", self.weights, k, x, k.conj())

    def depolarizing_part(self, x: np.ndarray) -> np.ndarray:
        """The isometric channel ``X -> Tr(X) 1``."""
        return np.trace(x) * np.eye(self.dim_out)

    def delta_apply(self, x: np.ndarray) -> np.ndarray:
        """``Phi(X) - Tr(X) 1``."""
        return self.apply(x) - self.depolarizing_part(x)

    @cached_property
    def matrix(self) -> np.ndarray:
        """Dense map from row-major flattened inputs to flattened outputs."""
        k = self.kraus
        m = np.einsum("a,acl,adm->cdlm", self.weights, k, k.conj())
        return m.reshape(self.dim_out**2, self.dim_in**2)

    def kraus_sums(self) -> tuple[np.ndarray, np.ndarray]:
        """Unweighted ``sum K^dagger K`` and ``sum K K^dagger``."""
        k = self.kraus
        return (
            np.einsum("acl,acm->lm", k.conj(), k),
            np.einsum("acl,adl->cd", k, k.conj()),
        )


def build_superoperator(p: PepsNetwork, v: int, n: int) -> VirtualSuperoperator:
    """Kraus form of the double layer at ``v`` with output leg towards ``n``."""
    g = p.graph
    if n not in g.neighbors[v]:
        raise ValueError(f"{n} is not a neighbor of {v}")
    D = p.bond_dim
    t = p.tensors[v]
    k = t.ndim - 1
    s, _, uh = svd(matricize(t, [0]))
    u = uh.conj().T  # columns are right singular vectors
    leg = g.leg(v, n)
    r = u.shape[1]
    kr = u.T.reshape((r,) + (D,) * k)
    kr = np.moveaxis(kr, 1 + leg, 1).reshape(r, D, D ** (k - 1))
    return VirtualSuperoperator(v, n, kr, s**2)
