"""Shared builders for the test suite.

Instances are cached per (graph, epsilon, seed) so that several test
modules can reuse the same converged fixed point without recomputing it.
"""

from __future__ import annotations

import itertools
from functools import lru_cache

import numpy as np

from bppeps.bp import find_fixed_point
from bppeps.graph import Graph, graph_from_spec
from bppeps.loops import bp_normalization
from bppeps.peps import generate_random_peps

DESK_GRAPHS = ["complete:3", "cycle:4", "complete:4", "grid:2x3:periodic"]
PRISM = "grid:2x3:periodic"
LADDER = "grid:2x8:periodic"


@lru_cache(maxsize=None)
def graph(spec: str) -> Graph:
    return graph_from_spec(spec)


@lru_cache(maxsize=None)
def network(spec: str, eps: float, seed: int = 0, D: int = 2):
    return generate_random_peps(graph(spec), D, seed, eps)


@lru_cache(maxsize=None)
def converged(spec: str, eps: float, seed: int = 0, D: int = 2):
    """Return ``(p, mu, log, norm)`` at the BP fixed point."""
    p = network(spec, eps, seed, D)
    mu, log = find_fixed_point(p, 1e-12, 2000)
    assert log.converged
    return p, mu, log, bp_normalization(p, mu)


def random_hermitian(d: int, seed: int) -> np.ndarray:
    """Hermitian matrix with unit operator norm."""
    r = np.random.default_rng(seed)
    h = r.normal(size=(d, d)) + 1j * r.normal(size=(d, d))
    h = (h + h.conj().T) / 2
    return h / np.max(np.abs(np.linalg.eigvalsh(h)))


def unit_interval_op(d: int, seed: int) -> np.ndarray:
    """Hermitian matrix whose spectrum spans exactly [0, 1]."""
    r = np.random.default_rng(seed)
    h = r.normal(size=(d, d)) + 1j * r.normal(size=(d, d))
    h = (h + h.conj().T) / 2
    w, v = np.linalg.eigh(h)
    w = (w - w.min()) / (w.max() - w.min())
    return (v * w) @ v.conj().T


def random_graph(n: int, p: float, seed: int, max_edges: int = 12) -> Graph:
    r = np.random.default_rng(seed)
    edges = [(u, v) for u, v in itertools.combinations(range(n), 2) if r.random() < p]
    return Graph(n, edges[:max_edges])


def brute_force_loops(g: Graph, max_weight: int, anchors=frozenset()):
    """All edge subsets that are connected with every non-anchor degree >= 2."""
    out = []
    edges = list(g.edges)
    for k in range(1, min(max_weight, len(edges)) + 1):
        for sub in itertools.combinations(edges, k):
            deg: dict[int, int] = {}
            for u, v in sub:
                deg[u] = deg.get(u, 0) + 1
                deg[v] = deg.get(v, 0) + 1
            if any(c < 2 and x not in anchors for x, c in deg.items()):
                continue
            # connectivity by union-find
            parent = {x: x for x in deg}

            def find(x):
                while parent[x] != x:
                    parent[x] = parent[parent[x]]
                    x = parent[x]
                return x

            for u, v in sub:
                parent[find(u)] = find(v)
            if len({find(x) for x in deg}) == 1:
                out.append(tuple(sorted(sub)))
    return sorted(out, key=lambda s: (len(s), s))


def random_message(D: int, r: np.random.Generator) -> np.ndarray:
    """Random positive definite unit-trace matrix."""
    a = r.normal(size=(D, D)) + 1j * r.normal(size=(D, D))
    m = a @ a.conj().T + 0.05 * np.eye(D)
    return m / np.trace(m).real
