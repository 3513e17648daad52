"""Graph topology, directed-edge indexing, distances and loop enumeration."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "INF",
    "Graph",
    "Loop",
    "AnchoredLoop",
    "distance",
    "region_distance",
    "enumerate_loops",
    "enumerate_anchored_loops",
    "loops_touching",
    "is_loop",
    "grid_graph",
    "complete_graph",
    "cycle_graph",
    "random_regular_graph",
    "graph_from_spec",
]

#: Distance reported between vertices in different connected components.
INF = math.inf

Edge = tuple[int, int]


@dataclass(frozen=True)
class Graph:
    """Undirected simple graph on vertices ``0..n-1``.

    Parameters
    ----------
    n : int
        Number of vertices.
    edges : sequence of pairs
        Unordered vertex pairs. They are normalized to ``(u, v)`` with
        ``u < v`` and stored sorted. Self loops and parallel edges are
        rejected.
    """

    n: int
    edges: tuple[Edge, ...]

    def __init__(self, n: int, edges: Iterable[Sequence[int]]):
        n = int(n)
        if n <= 0:
            raise ValueError("vertex count must be positive")
        normed = []
        for e in edges:
            u, v = (int(x) for x in e)
            if u == v:
                raise ValueError(f"self-loop at vertex {u}")
            if not (0 <= u < n and 0 <= v < n):
                raise ValueError(f"edge ({u}, {v}) out of range for n={n}")
            normed.append((min(u, v), max(u, v)))
        if len(set(normed)) != len(normed):
            raise ValueError("parallel edges are not allowed")
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "edges", tuple(sorted(normed)))

    # ------------------------------------------------------------------ #
    # adjacency and indexing
    # ------------------------------------------------------------------ #

    @cached_property
    def neighbors(self) -> tuple[tuple[int, ...], ...]:
        """Sorted neighbor tuple for every vertex."""
        adj: list[list[int]] = [[] for _ in range(self.n)]
        for u, v in self.edges:
            adj[u].append(v)
            adj[v].append(u)
        return tuple(tuple(sorted(a)) for a in adj)

    def degree(self, v: int) -> int:
        return len(self.neighbors[v])

    @cached_property
    def max_degree(self) -> int:
        return max((len(a) for a in self.neighbors), default=0)

    @cached_property
    def edge_index(self) -> dict[Edge, int]:
        """Map from normalized undirected edge to its position in ``edges``."""
        return {e: i for i, e in enumerate(self.edges)}

    @cached_property
    def directed_edges(self) -> tuple[Edge, ...]:
        """All directed edges, ordered lexicographically by (source, target)."""
        out = []
        for u, v in self.edges:
            out.append((u, v))
            out.append((v, u))
        return tuple(sorted(out))

    @cached_property
    def directed_index(self) -> dict[Edge, int]:
        return {e: i for i, e in enumerate(self.directed_edges)}

    @cached_property
    def reverse_index(self) -> np.ndarray:
        """``reverse_index[i]`` is the id of the reversed directed edge ``i``."""
        di = self.directed_index
        return np.array([di[(w, v)] for v, w in self.directed_edges], dtype=np.intp)

    def reverse(self, i: int) -> int:
        return int(self.reverse_index[i])

    def leg(self, v: int, w: int) -> int:
        """Position of neighbor ``w`` among the virtual legs of ``v``."""
        return self.neighbors[v].index(w)

    # ------------------------------------------------------------------ #
    # distances
    # ------------------------------------------------------------------ #

    def bfs(self, sources: Iterable[int]) -> np.ndarray:
        """Distances from a vertex set; unreachable vertices get -1."""
        dist = np.full(self.n, -1, dtype=np.int64)
        queue = deque()
        for s in sources:
            if dist[s] < 0:
                dist[s] = 0
                queue.append(s)
        while queue:
            u = queue.popleft()
            for w in self.neighbors[u]:
                if dist[w] < 0:
                    dist[w] = dist[u] + 1
                    queue.append(w)
        return dist

    @cached_property
    def distances(self) -> np.ndarray:
        """All-pairs distance matrix (-1 for unreachable pairs)."""
        return np.stack([self.bfs([v]) for v in range(self.n)])

    @cached_property
    def diameter(self) -> float:
        d = self.distances
        if (d < 0).any():
            return INF
        return int(d.max())

    def region_distances(self, region: Iterable[int]) -> np.ndarray:
        """Distance of every vertex to the region, as floats with ``inf``."""
        d = self.bfs(region).astype(float)
        d[d < 0] = INF
        return d

    # ------------------------------------------------------------------ #
    # serialization
    # ------------------------------------------------------------------ #

    def to_json(self) -> dict:
        return {"vertices": self.n, "edges": [list(e) for e in self.edges]}

    @classmethod
    def from_json(cls, obj: dict) -> "Graph":
        return cls(obj["vertices"], obj["edges"])


def distance(g: Graph, u: int, v: int) -> float:
    """Shortest-path edge count between ``u`` and ``v`` (``INF`` if none)."""
    d = int(g.distances[u, v])
    return INF if d < 0 else d


def region_distance(g: Graph, a: Iterable[int], b: Iterable[int]) -> float:
    """Minimum distance between two nonempty vertex regions."""
    a, b = list(a), list(b)
    if not a or not b:
        raise ValueError("regions must be nonempty")
    d = g.region_distances(a)[b].min()
    return INF if math.isinf(d) else int(d)


# ---------------------------------------------------------------------- #
# loops
# ---------------------------------------------------------------------- #


@dataclass(frozen=True)
class Loop:
    """A connected edge subset of a graph.

    ``edges`` is the sorted tuple of normalized edges and ``vertices`` the
    sorted tuple of the vertices they touch. Loops compare and hash by
    their edge set.
    """

    edges: tuple[Edge, ...]
    vertices: tuple[int, ...] = field(compare=False)

    @classmethod
    def from_edges(cls, edges: Iterable[Edge]) -> "Loop":
        es = tuple(sorted((min(e), max(e)) for e in edges))
        vs = tuple(sorted({x for e in es for x in e}))
        return cls(es, vs)

    @property
    def weight(self) -> int:
        return len(self.edges)

    def degrees(self) -> dict[int, int]:
        deg = {v: 0 for v in self.vertices}
        for u, v in self.edges:
            deg[u] += 1
            deg[v] += 1
        return deg

    def touches(self, region: Iterable[int]) -> bool:
        return not set(self.vertices).isdisjoint(region)

    def to_json(self) -> dict:
        return {"edges": [list(e) for e in self.edges], "weight": self.weight}


@dataclass(frozen=True)
class AnchoredLoop(Loop):
    """Loop that may terminate with degree one inside anchor regions."""

    anchors: tuple[frozenset, ...] = field(default=(), compare=False)

    @classmethod
    def from_edges(cls, edges, anchors=()) -> "AnchoredLoop":  # type: ignore[override]
        base = Loop.from_edges(edges)
        return cls(base.edges, base.vertices, tuple(frozenset(a) for a in anchors))


def _connected(edges: Sequence[Edge]) -> bool:
    if not edges:
        return False
    adj: dict[int, list[int]] = {}
    for u, v in edges:
        adj.setdefault(u, []).append(v)
        adj.setdefault(v, []).append(u)
    start = edges[0][0]
    seen = {start}
    stack = [start]
    while stack:
        u = stack.pop()
        for w in adj[u]:
            if w not in seen:
                seen.add(w)
                stack.append(w)
    return len(seen) == len(adj)


def is_loop(edges: Sequence[Edge], anchor_set: Iterable[int] = ()) -> bool:
    """Check connectivity and the minimum-degree rule outside the anchors."""
    if not _connected(edges):
        return False
    anchor_set = set(anchor_set)
    deg: dict[int, int] = {}
    for u, v in edges:
        deg[u] = deg.get(u, 0) + 1
        deg[v] = deg.get(v, 0) + 1
    return all(d >= 2 or v in anchor_set for v, d in deg.items())


def _line_graph(g: Graph) -> list[list[int]]:
    incident: list[list[int]] = [[] for _ in range(g.n)]
    for i, (u, v) in enumerate(g.edges):
        incident[u].append(i)
        incident[v].append(i)
    adj = []
    for i, (u, v) in enumerate(g.edges):
        adj.append(sorted((set(incident[u]) | set(incident[v])) - {i}))
    return adj


def _connected_edge_sets(
    g: Graph, max_weight: int, anchor_set: frozenset
) -> Iterator[tuple[int, ...]]:
    """Yield every connected edge subset passing the degree rule.

    This is the ESU scheme applied to the line graph: each connected set is
    grown from its smallest edge index, with an exclusive-neighborhood
    extension set so that every set is produced exactly once. Branches are
    cut when the deficient (degree-one, non-anchor) vertices cannot all be
    repaired with the remaining edge budget, since each added edge raises
    at most two degrees.
    """
    if max_weight <= 0:
        return
    line = _line_graph(g)
    edges = g.edges
    deg = np.zeros(g.n, dtype=np.int64)

    def deficient() -> int:
        return sum(1 for v in touched if deg[v] == 1 and v not in anchor_set)

    touched: list[int] = []

    def add(i: int) -> None:
        for x in edges[i]:
            if deg[x] == 0:
                touched.append(x)
            deg[x] += 1

    def remove(i: int) -> None:
        for x in edges[i]:
            deg[x] -= 1
            if deg[x] == 0:
                touched.remove(x)

    def extend(sub: list[int], nbhd: set[int], ext: list[int], root: int):
        bad = deficient()
        if bad == 0:
            yield tuple(sorted(sub))
        budget = max_weight - len(sub)
        if budget <= 0 or (bad + 1) // 2 > budget:
            return
        ext = list(ext)
        while ext:
            w = ext.pop()
            new = [u for u in line[w] if u > root and u not in nbhd]
            sub.append(w)
            add(w)
            yield from extend(sub, nbhd | set(new), ext + new, root)
            remove(w)
            sub.pop()

    for root in range(len(edges)):
        start = [u for u in line[root] if u > root]
        add(root)
        yield from extend([root], set(start) | {root}, start, root)
        remove(root)


def enumerate_loops(g: Graph, max_weight: int) -> list[Loop]:
    """All loops (connected, minimum internal degree 2) with weight <= m.

    Returned in canonical order: by weight, then by sorted edge list.
    """
    if max_weight < 0:
        raise ValueError("max_weight must be nonnegative")
    found = [
        Loop.from_edges(g.edges[i] for i in s)
        for s in _connected_edge_sets(g, max_weight, frozenset())
    ]
    found.sort(key=lambda l: (l.weight, l.edges))
    return found


def enumerate_anchored_loops(
    g: Graph, anchors: Sequence[Iterable[int]], max_weight: int
) -> list[AnchoredLoop]:
    """Connected edge subsets whose degree-one vertices lie in the anchors."""
    if max_weight < 0:
        raise ValueError("max_weight must be nonnegative")
    anchors = tuple(frozenset(a) for a in anchors)
    if not anchors:
        raise ValueError("at least one anchor region is required")
    union = frozenset().union(*anchors)
    found = [
        AnchoredLoop.from_edges((g.edges[i] for i in s), anchors)
        for s in _connected_edge_sets(g, max_weight, union)
    ]
    found.sort(key=lambda l: (l.weight, l.edges))
    return found


def loops_touching(loops: Iterable[Loop], region: Iterable[int]) -> list[Loop]:
    """Loops whose vertex set meets ``region``, in input order."""
    region = set(region)
    return [l for l in loops if l.touches(region)]


# ---------------------------------------------------------------------- #
# built-in families
# ---------------------------------------------------------------------- #


def grid_graph(rows: int, cols: int, periodic: bool = False) -> Graph:
    """Square grid; periodic wrap-arounds that would duplicate an edge are merged."""
    if rows < 1 or cols < 1:
        raise ValueError("grid dimensions must be positive")
    edges = set()
    for r in range(rows):
        for c in range(cols):
            v = r * cols + c
            nbrs = []
            if r + 1 < rows or (periodic and rows > 1):
                nbrs.append(((r + 1) % rows) * cols + c)
            if c + 1 < cols or (periodic and cols > 1):
                nbrs.append(r * cols + (c + 1) % cols)
            for w in nbrs:
                if w != v:
                    edges.add((min(v, w), max(v, w)))
    return Graph(rows * cols, edges)


def complete_graph(n: int) -> Graph:
    return Graph(n, [(u, v) for u in range(n) for v in range(u + 1, n)])


def cycle_graph(n: int) -> Graph:
    if n < 3:
        raise ValueError("a cycle needs at least 3 vertices")
    return Graph(n, [(i, (i + 1) % n) for i in range(n)])


def random_regular_graph(n: int, d: int, seed: int) -> Graph:
    import networkx as nx

    h = nx.random_regular_graph(d, n, seed=seed)
    return Graph(n, list(h.edges()))


def graph_from_spec(spec: str) -> Graph:
    """Parse ``grid:RxC[:periodic]``, ``complete:n``, ``cycle:n`` or
    ``random-regular:n:d:seed``."""
    parts = spec.strip().split(":")
    kind = parts[0]
    try:
        if kind == "grid":
            r, c = (int(x) for x in parts[1].lower().split("x"))
            periodic = len(parts) > 2 and parts[2] == "periodic"
            if len(parts) > 3 or (len(parts) == 3 and not periodic):
                raise ValueError
            return grid_graph(r, c, periodic)
        if kind == "complete" and len(parts) == 2:
            return complete_graph(int(parts[1]))
        if kind == "cycle" and len(parts) == 2:
            return cycle_graph(int(parts[1]))
        if kind == "random-regular" and len(parts) == 4:
            return random_regular_graph(int(parts[1]), int(parts[2]), int(parts[3]))
    except (ValueError, IndexError) as exc:
        raise ValueError(f"malformed graph spec {spec!r}") from exc
    raise ValueError(f"unknown graph spec {spec!r}")
