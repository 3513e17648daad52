"""Message passing map, fixed points, convergence logs and analytic thresholds."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import IllConditionedError
from .graph import Graph
from .peps import PepsNetwork
from .tensors import (
    MultiplyCounter,
    contract,
    hermitian_part,
    tensor_from_json,
    tensor_to_json,
    trace_norm_hermitian,
)

__all__ = [
    "MessageSet",
    "ConvergenceLog",
    "Thresholds",
    "apply_message_map",
    "find_fixed_point",
    "converge_restricted",
    "seeded_iterate",
    "compute_thresholds",
    "message_distance",
    "POSITIVITY_FLOOR",
    "CLIP_FLOOR",
]

#: smallest admissible trace of an unnormalized message
POSITIVITY_FLOOR = 1e-14
#: eigenvalues below minus this value are clipped during positivity repair
CLIP_FLOOR = 1e-10


@dataclass(frozen=True, eq=False)
class MessageSet:
    """One ``D x D`` matrix per directed edge, stored in ``graph.directed_edges`` order.

    The stored array is read-only; ``data[i]`` is the message on the
    directed edge ``graph.directed_edges[i]``, indexed ``[bra, ket]``.
    """

    graph: Graph
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        a = np.asarray(self.data, dtype=complex)
        if a.ndim != 3 or a.shape[0] != len(self.graph.directed_edges):
            raise ValueError("message array must have shape (n_directed, D, D)")
        if a.flags.writeable:
            a = a.copy()
            a.setflags(write=False)
        object.__setattr__(self, "data", a)

    @property
    def bond_dim(self) -> int:
        return self.data.shape[1]

    def __getitem__(self, edge: tuple[int, int]) -> np.ndarray:
        return self.data[self.graph.directed_index[edge]]

    @classmethod
    def uniform(cls, graph: Graph, D: int) -> "MessageSet":
        eye = np.eye(D, dtype=complex) / D
        return cls(graph, np.broadcast_to(eye, (len(graph.directed_edges), D, D)).copy())

    def to_json(self) -> dict:
        return {
            "messages": {
                f"{u}->{v}": tensor_to_json(self.data[i])
                for i, (u, v) in enumerate(self.graph.directed_edges)
            }
        }

    @classmethod
    def from_json(cls, graph: Graph, obj: dict) -> "MessageSet":
        msgs = obj["messages"]
        data = [tensor_from_json(msgs[f"{u}->{v}"]) for u, v in graph.directed_edges]
        return cls(graph, np.stack(data))


def message_distance(a: MessageSet, b: MessageSet) -> float:
    """``max_e ||a_e - b_e||_1`` (trace norm)."""
    if a.data.shape[0] == 0:
        return 0.0
    return float(trace_norm_hermitian(hermitian_part(a.data - b.data)).max())


@dataclass
class ConvergenceLog:
    """Per-iteration sup-edge trace distances of a message iteration.

    ``distances[t]`` is ``||mu^(t+1) - mu^(t)||_max``.
    """

    tol: float
    distances: list[float] = field(default_factory=list)
    converged: bool = False
    clips: int = 0

    @property
    def iterations(self) -> int:
        return len(self.distances)

    @property
    def ratios(self) -> list[float]:
        d = self.distances
        return [d[i + 1] / d[i] for i in range(len(d) - 1) if d[i] > 0]

    def to_jsonl(self) -> str:
        lines = [
            json.dumps({"iteration": t + 1, "distance": d})
            for t, d in enumerate(self.distances)
        ]
        return "\n".join(lines)

    def to_json(self) -> dict:
        return {
            "tol": self.tol,
            "iterations": self.iterations,
            "converged": self.converged,
            "clips": self.clips,
            "distances": list(self.distances),
        }


# ---------------------------------------------------------------------- #
# the message map
# ---------------------------------------------------------------------- #


def _edge_update(
    e_v: np.ndarray,
    incoming: list[np.ndarray],
    leg: int,
    D: int,
    counter: MultiplyCounter | None,
) -> tuple[np.ndarray, int]:
    """New normalized message leaving a vertex through ``leg``.

    ``e_v`` is the doubled double layer and ``incoming[i]`` the flattened
    message arriving on leg ``i``. The arithmetic depends only on these
    arguments, which the lightcone guarantees rely on.
    """
    t = e_v
    for i in range(len(incoming) - 1, -1, -1):
        if i != leg:
            t = contract(t, incoming[i], [(i, 0)], counter)
    f = hermitian_part(t.reshape(D, D))
    tr = float(np.trace(f).real)
    if not tr > POSITIVITY_FLOOR:
        raise IllConditionedError(
            f"message trace {tr:.3e} is not positive; the site tensor is "
            "(numerically) non-injective"
        )
    f = f / tr
    w = np.linalg.eigvalsh(f)
    if w[0] < -CLIP_FLOOR:
        w, vecs = np.linalg.eigh(f)
        w = np.where(w < -CLIP_FLOOR, 0.0, w)
        f = (vecs * w) @ vecs.conj().T
        f = hermitian_part(f)
        f = f / np.trace(f).real
        return f, 1
    return f, 0


def _update(
    p: PepsNetwork,
    mu: MessageSet,
    active: Iterable[int] | None,
    counter: MultiplyCounter | None,
) -> tuple[np.ndarray, int]:
    g = p.graph
    D = p.bond_dim
    di = g.directed_index
    out = np.array(mu.data)
    clips = 0
    active_set = None if active is None else set(active)
    flat = mu.data.reshape(len(g.directed_edges), D * D)
    for v in range(g.n):
        nbrs = g.neighbors[v]
        targets = [
            (j, di[(v, n)])
            for j, n in enumerate(nbrs)
            if active_set is None or di[(v, n)] in active_set
        ]
        if not targets:
            continue
        incoming = [flat[di[(n, v)]] for n in nbrs]
        e_v = p.double_layers[v]
        for j, idx in targets:
            out[idx], c = _edge_update(e_v, incoming, j, D, counter)
            clips += c
    return out, clips


def apply_message_map(
    p: PepsNetwork, mu: MessageSet, counter: MultiplyCounter | None = None
) -> MessageSet:
    """One synchronous application of the normalized message map."""
    out, _ = _update(p, mu, None, counter)
    return MessageSet(p.graph, out)


def find_fixed_point(
    p: PepsNetwork,
    tol: float = 1e-12,
    max_iter: int = 1000,
    start: MessageSet | None = None,
    counter: MultiplyCounter | None = None,
) -> tuple[MessageSet, ConvergenceLog]:
    """Iterate the message map from uniform ``1/D`` messages until converged.

    When ``max_iter`` is exhausted the last iterate is returned with
    ``log.converged = False``.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    return converge_restricted(p, start, None, tol, max_iter, counter)


def converge_restricted(
    p: PepsNetwork,
    start: MessageSet | None,
    active: Iterable[int] | None,
    tol: float = 1e-12,
    max_iter: int = 1000,
    counter: MultiplyCounter | None = None,
    changed: Iterable[int] | None = None,
) -> tuple[MessageSet, ConvergenceLog]:
    """Synchronous iteration updating only the ``active`` directed edges.

    Messages on inactive edges are kept frozen (bit for bit). ``active=None``
    updates every edge.

    ``changed`` lists vertices whose tensors differ from those that produced
    ``start``. When given, the first sweep recomputes only edges leaving
    these vertices, and later sweeps only edges with an incoming message
    that changed in the previous sweep. Edges outside this frontier keep
    their ``start`` values, which is exact up to the stationarity residual
    of ``start``.
    """
    g = p.graph
    mu = MessageSet.uniform(g, p.bond_dim) if start is None else start
    active = None if active is None else sorted(set(active))
    log = ConvergenceLog(tol=tol)
    dirty = None if changed is None else set(changed)
    for _ in range(max_iter):
        todo = active
        if dirty is not None:
            pool = range(len(g.directed_edges)) if active is None else active
            todo = [i for i in pool if g.directed_edges[i][0] in dirty]
        out, clips = _update(p, mu, todo, counter)
        new = MessageSet(p.graph, out)
        log.clips += clips
        d = message_distance(new, mu)
        log.distances.append(d)
        if dirty is not None:
            dirty = {
                g.directed_edges[i][1]
                for i in todo
                if out[i].tobytes() != mu.data[i].tobytes()
            }
        mu = new
        if d <= tol:
            log.converged = True
            break
    return mu, log


def seeded_iterate(
    p: PepsNetwork,
    start: MessageSet,
    steps: int,
    counter: MultiplyCounter | None = None,
) -> list[MessageSet]:
    """Trajectory ``[start, F(start), ..., F^steps(start)]``."""
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    traj = [start]
    for _ in range(steps):
        traj.append(apply_message_map(p, traj[-1], counter))
    return traj


# ---------------------------------------------------------------------- #
# thresholds
# ---------------------------------------------------------------------- #


@dataclass(frozen=True)
class Thresholds:
    """Closed-form constants for bond dimension ``D``, degree ``Delta`` and ``eps``."""

    D: int
    Delta: int
    epsilon: float
    eps_star: float
    q: float
    c0: float
    eta: float
    eps_double_star: float
    inv_xi_star: float

    @property
    def xi_star(self) -> float:
        return 0.0 if math.isinf(self.inv_xi_star) else 1.0 / self.inv_xi_star

    @property
    def contracting(self) -> bool:
        return self.q < 1.0

    def to_json(self) -> dict:
        return {
            "D": self.D,
            "Delta": self.Delta,
            "epsilon": self.epsilon,
            "eps_star": self.eps_star,
            "q": self.q,
            "c0": self.c0,
            "eta": self.eta,
            "eps_double_star": self.eps_double_star,
            "inv_xi_star": self.inv_xi_star,
        }


def q_rate(Delta: int, eps: float) -> float:
    """Contraction constant ``2 (Delta - 1) eps / (1 - eps)``."""
    return 2.0 * (Delta - 1) * eps / (1.0 - eps)


def compute_thresholds(D: int, Delta: int, eps: float) -> Thresholds:
    if D < 2 or Delta < 2:
        raise ValueError("need D >= 2 and Delta >= 2")
    if not 0.0 <= eps < 1.0:
        raise ValueError("eps must lie in [0, 1)")
    eps_star = 1.0 / (2 * Delta - 1)
    decay_term = (
        D ** (Delta / 2 - 2)
        / (2 * (D + 2))
        * math.exp(-0.75 * Delta)
        * (2 * Delta) ** (-Delta / 2)
    )
    eds = min(decay_term, 1.0 / (1.0 + 2.0 * math.sqrt(D)), 1.0 / D)
    inv_xi = math.inf if eps == 0 else math.log(eps_star / eps)
    return Thresholds(
        D=D,
        Delta=Delta,
        epsilon=eps,
        eps_star=eps_star,
        q=q_rate(Delta, eps),
        c0=math.log(2 * math.e * Delta) + 0.5,
        eta=2.0 * D ** (2 - Delta / 2) * (D + 2) * eps,
        eps_double_star=eds,
        inv_xi_star=inv_xi,
    )
