"""BP normalization data and the loop activities built from excitation projectors.

Every undirected edge ``{u, v}`` of the norm network carries a doubled
index of size ``D**2``. The identity on that index splits as ``P + R``,
where ``P = m_(v,u) m_(u,v)^T / I_uv`` reinserts the fixed-point messages
and ``R = 1 - P`` is the excitation projector. Expanding every edge gives
the loop expansion: edges carrying ``R`` form the excited subgraph, and
vertices with a single excited leg vanish at the fixed point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .bp import MessageSet
from .errors import IllConditionedError
from .graph import Loop
from .peps import PepsNetwork
from .tensors import MultiplyCounter, contract

__all__ = [
    "BpNormalization",
    "LoopActivity",
    "LoopEvaluator",
    "bp_normalization",
    "excitation_projector_apply",
    "loop_activity",
    "dressed_loop_activity",
    "OVERLAP_GUARD",
]

OVERLAP_GUARD = 1e-12


@dataclass(frozen=True)
class BpNormalization:
    """Edge overlaps, vertex BP values and ``log Z_BP``.

    ``overlaps[i]`` belongs to ``graph.edges[i]``; ``z_v[v]`` is the vertex
    value ``Z^(v)``.
    """

    overlaps: np.ndarray
    z_v: np.ndarray
    log_z_bp: float

    def to_json(self) -> dict:
        return {
            "overlaps": [float(x) for x in self.overlaps],
            "z_v": [float(x) for x in self.z_v],
            "log_z_bp": self.log_z_bp,
        }


@dataclass(frozen=True)
class LoopActivity:
    loop: Loop
    value: complex
    dressing: str = "none"

    def to_json(self, bound: float | None = None) -> dict:
        out = self.loop.to_json()
        out["value"] = [float(self.value.real), float(self.value.imag)]
        if bound is not None:
            out["bound"] = bound
        return out


def _flat(mu: MessageSet) -> np.ndarray:
    D = mu.bond_dim
    return mu.data.reshape(-1, D * D)


def _contract_messages(
    t: np.ndarray, vecs: list[np.ndarray | None], counter: MultiplyCounter | None
) -> np.ndarray:
    """Contract leg ``i`` of ``t`` with ``vecs[i]`` wherever it is not None."""
    for i in range(len(vecs) - 1, -1, -1):
        if vecs[i] is not None:
            t = contract(t, vecs[i], [(i, 0)], counter)
    return t


def _overlaps(p: PepsNetwork, flat: np.ndarray) -> np.ndarray:
    g = p.graph
    di = g.directed_index
    out = np.empty(len(g.edges))
    for i, (u, v) in enumerate(g.edges):
        val = np.sum(flat[di[(u, v)]] * flat[di[(v, u)]])
        out[i] = val.real
    return out


def _vertex_value(
    p: PepsNetwork,
    flat: np.ndarray,
    overlaps: np.ndarray,
    v: int,
    op: np.ndarray | None,
    counter: MultiplyCounter | None,
) -> complex:
    g = p.graph
    di, ei = g.directed_index, g.edge_index
    vecs = [
        flat[di[(n, v)]] / math.sqrt(overlaps[ei[(min(v, n), max(v, n))]])
        for n in g.neighbors[v]
    ]
    t = _contract_messages(p.dressed_double_layer(v, op), vecs, counter)
    return complex(t)


def bp_normalization(
    p: PepsNetwork, mu: MessageSet, counter: MultiplyCounter | None = None
) -> BpNormalization:
    """Overlaps ``I_vw``, vertex values ``Z^(v)`` and ``log Z_BP``.

    Raises
    ------
    IllConditionedError
        If any overlap or vertex value is not positive.
    """
    flat = _flat(mu)
    ov = _overlaps(p, flat)
    if np.any(~(ov > 0)):
        raise IllConditionedError(
            "BP normalization ill-conditioned: nonpositive message overlap"
        )
    z = np.array(
        [_vertex_value(p, flat, ov, v, None, counter) for v in range(p.graph.n)]
    )
    if np.any(~(z.real > 0)):
        raise IllConditionedError(
            "BP normalization ill-conditioned: nonpositive vertex value"
        )
    zr = z.real.copy()
    zr.setflags(write=False)
    ov.setflags(write=False)
    return BpNormalization(ov, zr, float(np.sum(np.log(zr))))


def update_normalization(
    p: PepsNetwork,
    mu: MessageSet,
    old: BpNormalization,
    vertices,
    edges,
    counter: MultiplyCounter | None = None,
) -> BpNormalization:
    """Recompute overlaps on ``edges`` (undirected ids) and values at ``vertices``.

    Vertex values are refreshed for the given vertices and for every
    endpoint of a refreshed edge. Entries are produced by the same code as
    :func:`bp_normalization`, so equal inputs give equal bits.
    """
    g = p.graph
    flat = _flat(mu)
    di = g.directed_index
    ov = np.array(old.overlaps)
    verts = set(vertices)
    for i in sorted(set(edges)):
        u, v = g.edges[i]
        ov[i] = np.sum(flat[di[(u, v)]] * flat[di[(v, u)]]).real
        verts.update((u, v))
    if np.any(~(ov > 0)):
        raise IllConditionedError(
            "BP normalization ill-conditioned: nonpositive message overlap"
        )
    z = np.array(old.z_v)
    for v in sorted(verts):
        val = _vertex_value(p, flat, ov, v, None, counter)
        if not val.real > 0:
            raise IllConditionedError(
                "BP normalization ill-conditioned: nonpositive vertex value"
            )
        z[v] = val.real
    ov.setflags(write=False)
    z.setflags(write=False)
    return BpNormalization(ov, z, float(np.sum(np.log(z))))


def excitation_projector_apply(
    mu_fwd: np.ndarray, mu_bwd: np.ndarray, y: np.ndarray
) -> np.ndarray:
    """``Y - Tr(X Y) / Tr(X X') X'`` with ``X = mu_fwd`` and ``X' = mu_bwd``."""
    x, xp = np.asarray(mu_fwd), np.asarray(mu_bwd)
    den = np.trace(x @ xp)
    if abs(den) < OVERLAP_GUARD:
        raise IllConditionedError("excitation projector overlap below guard")
    return y - np.trace(x @ y) / den * xp


class LoopEvaluator:
    """Contracts excited subgraphs of the norm network at a BP fixed point.

    Parameters
    ----------
    p : PepsNetwork
    mu : MessageSet
        Fixed-point messages.
    norm : BpNormalization, optional
        Computed from ``(p, mu)`` if omitted.
    counter : MultiplyCounter, optional
        Receives the multiplication count of every contraction.
    """

    def __init__(
        self,
        p: PepsNetwork,
        mu: MessageSet,
        norm: BpNormalization | None = None,
        counter: MultiplyCounter | None = None,
    ):
        self.p = p
        self.mu = mu
        self.counter = counter
        self.norm = bp_normalization(p, mu, counter) if norm is None else norm
        self._flat = _flat(mu)
        self._r: dict[tuple[int, int], np.ndarray] = {}

    # -- building blocks ------------------------------------------------ #

    def message_in(self, v: int, n: int) -> np.ndarray:
        """Flattened message arriving at ``v`` from ``n``, scaled by ``1/sqrt(I)``."""
        g = self.p.graph
        i = g.edge_index[(min(v, n), max(v, n))]
        return self._flat[g.directed_index[(n, v)]] / math.sqrt(self.norm.overlaps[i])

    def excitation(self, v: int, n: int) -> np.ndarray:
        """``R[x_v, x_n] = delta - m_(n,v)[x_v] m_(v,n)[x_n] / I``."""
        key = (v, n)
        if key not in self._r:
            g = self.p.graph
            di = g.directed_index
            i = g.edge_index[(min(v, n), max(v, n))]
            a = self._flat[di[(n, v)]]
            b = self._flat[di[(v, n)]]
            r = np.eye(a.size, dtype=complex) - np.outer(a, b) / self.norm.overlaps[i]
            r.setflags(write=False)
            self._r[key] = r
        return self._r[key]

    def vertex_value(self, v: int, op: np.ndarray | None = None) -> complex:
        """``Z^(v)`` (``op=None``) or its dressed counterpart ``Z^{O,(v)}``."""
        return _vertex_value(
            self.p, self._flat, self.norm.overlaps, v, op, self.counter
        )

    def beta(self, v: int, op: np.ndarray) -> complex:
        """``Z^{O,(v)} / Z^(v)``.

        Both values come from the same contraction code and the quotient is
        formed as ``Zo conj(Z) / |Z|^2``, so an identity insertion gives
        exactly ``1 + 0j``.
        """
        zo = complex(self.vertex_value(v, op))
        z = complex(self.vertex_value(v))
        den = (z * z.conjugate()).real
        return zo * z.conjugate() / den

    def bp_expectation(self, ops: Mapping[int, np.ndarray]) -> complex:
        """``prod_v Z^{O,(v)} / Z^(v)`` for a product operator."""
        val = 1.0 + 0j
        for v, op in sorted(ops.items()):
            val *= self.beta(v, op)
        return val

    def _decorated(
        self, w: int, loop_nbrs: set[int], op: np.ndarray | None
    ) -> tuple[np.ndarray, list[int]]:
        """Vertex tensor with messages on non-loop legs, divided by ``Z^(w)``.

        Loop legs stay open in ascending neighbor order; the ones pointing
        to a higher-indexed neighbor have ``R`` absorbed.
        """
        g = self.p.graph
        nbrs = g.neighbors[w]
        vecs = [None if n in loop_nbrs else self.message_in(w, n) for n in nbrs]
        t = _contract_messages(self.p.dressed_double_layer(w, op), vecs, self.counter)
        open_nbrs = [n for n in nbrs if n in loop_nbrs]
        for pos, n in enumerate(open_nbrs):
            if w < n:
                t = contract(t, self.excitation(w, n), [(pos, 0)], self.counter)
                t = np.moveaxis(t, -1, pos)
        t = t / self.norm.z_v[w]
        labels = [g.edge_index[(min(w, n), max(w, n))] for n in open_nbrs]
        return t, labels

    def decorated_tensors(
        self, loop: Loop, dressing: Mapping[int, np.ndarray] | None = None
    ) -> dict[int, tuple[np.ndarray, list[int]]]:
        dressing = dressing or {}
        adj: dict[int, set[int]] = {w: set() for w in loop.vertices}
        for u, v in loop.edges:
            adj[u].add(v)
            adj[v].add(u)
        return {w: self._decorated(w, adj[w], dressing.get(w)) for w in loop.vertices}

    def activity(
        self,
        loop: Loop,
        dressing: Mapping[int, np.ndarray] | None = None,
        order: Sequence[int] | None = None,
    ) -> complex:
        """Loop activity, optionally with operators inserted at loop vertices.

        The result is always normalized by the undressed vertex values.
        ``order`` overrides the vertex contraction order (breadth first from
        the smallest vertex by default).
        """
        dressing = dict(dressing or {})
        for v, op in dressing.items():
            if v not in loop.vertices:
                raise ValueError(f"operator at vertex {v} lies outside the loop")
            d = self.p.phys_dim
            if np.shape(op) != (d, d):
                raise ValueError(f"operator at vertex {v} must have shape ({d}, {d})")
        tens = self.decorated_tensors(loop, dressing)
        return self._contract_all(loop, tens, order)

    def _contract_all(self, loop: Loop, tens, order=None) -> complex:
        if order is not None:
            if sorted(order) != list(loop.vertices):
                raise ValueError("order must list every loop vertex once")
            return self._contract_in_order(list(order), tens)
        adj: dict[int, list[int]] = {w: [] for w in loop.vertices}
        for u, v in loop.edges:
            adj[u].append(v)
            adj[v].append(u)
        # breadth-first vertex order from the smallest vertex
        order = [loop.vertices[0]]
        seen = {order[0]}
        i = 0
        while i < len(order):
            for n in sorted(adj[order[i]]):
                if n not in seen:
                    seen.add(n)
                    order.append(n)
            i += 1
        return self._contract_in_order(order, tens)

    def _contract_in_order(self, order: list[int], tens) -> complex:
        cur, labels = tens[order[0]]
        labels = list(labels)
        for w in order[1:]:
            t, lw = tens[w]
            shared = [l for l in lw if l in labels]
            pairs = [(labels.index(l), lw.index(l)) for l in shared]
            cur = contract(cur, t, pairs, self.counter)
            labels = [l for l in labels if l not in shared] + [
                l for l in lw if l not in shared
            ]
        if labels:
            raise RuntimeError("loop contraction left open legs")
        return complex(cur)

    def cut_bound(self, loop: Loop) -> float:
        """Product of Frobenius norms of the decorated vertex tensors.

        Bounds ``|Z_l|`` because the Frobenius norm is submultiplicative
        under any pairwise contraction.
        """
        tens = self.decorated_tensors(loop)
        return float(np.prod([np.linalg.norm(t) for t, _ in tens.values()]))

    def excitation_block(self, v: int, n: int) -> np.ndarray:
        """Single-excited-leg vertex map as a ``D^2 x D^{2(k-1)}`` matrix.

        The double layer at ``v`` with ``R`` applied on the leg towards ``n``
        and all other legs left open, divided by ``Z^(v)``.
        """
        g = self.p.graph
        leg = g.leg(v, n)
        t = contract(self.p.double_layers[v], self.excitation(v, n), [(leg, 0)])
        t = np.moveaxis(t, -1, 0) / self.norm.z_v[v]
        return t.reshape(t.shape[0], -1)


def loop_activity(
    p: PepsNetwork, mu: MessageSet, norm: BpNormalization, loop: Loop
) -> LoopActivity:
    """Activity ``Z_l`` of one loop on the undressed norm network."""
    ev = LoopEvaluator(p, mu, norm)
    return LoopActivity(loop, ev.activity(loop))


def dressed_loop_activity(
    p: PepsNetwork,
    mu: MessageSet,
    norm: BpNormalization,
    loop: Loop,
    insertions: Mapping[int, np.ndarray],
) -> LoopActivity:
    """Activity with single-site operators inserted between bra and ket."""
    ev = LoopEvaluator(p, mu, norm)
    label = "none" if not insertions else "sites:" + ",".join(map(str, sorted(insertions)))
    return LoopActivity(loop, ev.activity(loop, insertions), label)
