"""Loop clusters with their Ursell coefficients, and truncated cluster expansions.

The expansions are evaluated at a BP fixed point using a
:class:`~bppeps.loops.LoopEvaluator`. Observables use product operators,
given as ``{vertex: d x d matrix}``; the additive and correlator variants
are restricted to single-site regions, where the derivative of the
exponentiated insertion is a plain operator insertion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Iterable, Mapping, Sequence

import numpy as np

from .bp import MessageSet
from .errors import NoCertificateError, SmallEstimateError
from .graph import Loop, enumerate_anchored_loops, enumerate_loops, region_distance
from .loops import BpNormalization, LoopEvaluator
from .peps import PepsNetwork
from .tensors import MultiplyCounter

__all__ = [
    "Cluster",
    "ClusterTerm",
    "ExpansionReport",
    "ObservableEstimate",
    "enumerate_clusters",
    "interaction_graph",
    "ursell",
    "free_energy",
    "expectation_multiplicative",
    "expectation_additive",
    "connected_correlator",
    "tail_bound",
    "decay_rate",
    "LOOP_FLOOR",
    "MAX_URSELL_SIZE",
    "BP_GUARD",
]

#: loop activities below this magnitude are treated as numerically zero
LOOP_FLOOR = 1e-13
MAX_URSELL_SIZE = 12
BP_GUARD = 1e-10


# ---------------------------------------------------------------------- #
# clusters and Ursell coefficients
# ---------------------------------------------------------------------- #


def _incompatible(a: Loop, b: Loop) -> bool:
    return not set(a.vertices).isdisjoint(b.vertices)


@dataclass(frozen=True)
class Cluster:
    """A multiset of loops, stored as parallel tuples of loops and multiplicities."""

    loops: tuple[Loop, ...]
    multiplicities: tuple[int, ...]

    def __post_init__(self):
        if len(self.loops) != len(self.multiplicities):
            raise ValueError("loops and multiplicities must align")
        if len(set(self.loops)) != len(self.loops):
            raise ValueError("duplicate loop entries; use multiplicities")
        if any(a < 1 for a in self.multiplicities):
            raise ValueError("multiplicities must be positive")

    @property
    def items(self) -> list[tuple[Loop, int]]:
        return list(zip(self.loops, self.multiplicities))

    @property
    def weight(self) -> int:
        return sum(l.weight * a for l, a in self.items)

    @property
    def size(self) -> int:
        """Number of loop occurrences ``n_W``."""
        return sum(self.multiplicities)

    @property
    def factorial(self) -> int:
        return math.prod(math.factorial(a) for a in self.multiplicities)

    @property
    def support(self) -> frozenset:
        return frozenset(v for l in self.loops for v in l.vertices)

    def touches(self, region: Iterable[int]) -> bool:
        return not self.support.isdisjoint(region)

    def to_json(self) -> list:
        return [
            {"edges": [list(e) for e in l.edges], "multiplicity": a}
            for l, a in self.items
        ]


def interaction_graph(w: Cluster) -> tuple[int, list[tuple[int, int]]]:
    """Occurrence graph: one vertex per loop copy, edges for identical or
    incompatible (vertex-sharing) loops."""
    occ = [i for i, a in enumerate(w.multiplicities) for _ in range(a)]
    edges = []
    for x in range(len(occ)):
        for y in range(x + 1, len(occ)):
            i, j = occ[x], occ[y]
            if i == j or _incompatible(w.loops[i], w.loops[j]):
                edges.append((x, y))
    return len(occ), edges


@lru_cache(maxsize=4096)
def _connected_signed_count(n: int, adj: tuple[int, ...]) -> int:
    """``sum over connected spanning subgraphs C of (-1)^|E(C)|``.

    Uses the subset recursion ``g(S) = sum_{T contains min S} c(T) g(S-T)``
    where ``g(S)`` is 1 if ``S`` is an independent set and 0 otherwise
    (the signed count of all spanning subgraphs).
    """
    full = (1 << n) - 1
    g = [0] * (full + 1)
    for s in range(full + 1):
        ok = 1
        t = s
        while t:
            low = t & -t
            i = low.bit_length() - 1
            if adj[i] & s:
                ok = 0
                break
            t ^= low
        g[s] = ok
    c = [0] * (full + 1)
    for s in range(1, full + 1):
        low = s & -s
        rest = s ^ low
        total = g[s]
        sub = rest
        while True:
            t = sub | low
            if t != s:
                total -= c[t] * g[s ^ t]
            if sub == 0:
                break
            sub = (sub - 1) & rest
        c[s] = total
    return c[full]


def ursell(w: Cluster) -> Fraction:
    """Exact Ursell coefficient ``phi(W)`` as a fraction.

    Raises
    ------
    ValueError
        If the cluster has more than ``MAX_URSELL_SIZE`` occurrences.
    """
    n, edges = interaction_graph(w)
    if n > MAX_URSELL_SIZE:
        raise ValueError(
            f"cluster with {n} loop occurrences exceeds the Ursell size guard "
            f"({MAX_URSELL_SIZE})"
        )
    adj = [0] * n
    for x, y in edges:
        adj[x] |= 1 << y
        adj[y] |= 1 << x
    return Fraction(_connected_signed_count(n, tuple(adj)), w.factorial)


def enumerate_clusters(loops: Sequence[Loop], max_weight: int) -> list[Cluster]:
    """All connected clusters of total weight at most ``max_weight``.

    Connected sets of distinct loops are grown on the incompatibility graph
    (each set generated once from its smallest loop index), then every
    assignment of multiplicities within the weight budget is added.
    """
    pool = sorted({l for l in loops if l.weight <= max_weight}, key=lambda l: (l.weight, l.edges))
    n = len(pool)
    w = [l.weight for l in pool]
    nbr = [
        [j for j in range(n) if j != i and _incompatible(pool[i], pool[j])]
        for i in range(n)
    ]
    out: list[Cluster] = []

    def multiplicities(idx: list[int]):
        base = sum(w[i] for i in idx)
        spare = max_weight - base

        def rec(k: int, left: int, acc: list[int]):
            if k == len(idx):
                yield tuple(acc)
                return
            extra = 0
            while extra * w[idx[k]] <= left:
                acc.append(1 + extra)
                yield from rec(k + 1, left - extra * w[idx[k]], acc)
                acc.pop()
                extra += 1

        yield from rec(0, spare, [])

    def emit(sub: list[int]):
        idx = sorted(sub)
        for mult in multiplicities(idx):
            out.append(Cluster(tuple(pool[i] for i in idx), mult))

    def extend(sub: list[int], weight: int, nbhd: set[int], ext: list[int], root: int):
        emit(sub)
        ext = list(ext)
        while ext:
            x = ext.pop()
            if weight + w[x] > max_weight:
                continue
            new = [u for u in nbr[x] if u > root and u not in nbhd]
            sub.append(x)
            extend(sub, weight + w[x], nbhd | set(new), ext + new, root)
            sub.pop()

    for root in range(n):
        start = [u for u in nbr[root] if u > root]
        extend([root], w[root], set(start) | {root}, start, root)

    index = {l: i for i, l in enumerate(pool)}
    out.sort(
        key=lambda c: (
            c.weight,
            c.size,
            tuple((index[l], a) for l, a in c.items),
        )
    )
    return out


# ---------------------------------------------------------------------- #
# certificates
# ---------------------------------------------------------------------- #


def decay_rate(weighted_values: Iterable[tuple[int, complex]]) -> float:
    """Achieved loop decay rate ``min(-log|Z| / |l|)`` over values above the floor.

    Returns ``inf`` when every value lies below :data:`LOOP_FLOOR`.
    """
    rates = [
        -math.log(abs(z)) / wt
        for wt, z in weighted_values
        if wt > 0 and abs(z) > LOOP_FLOOR
    ]
    return min(rates, default=math.inf)


def _c0(max_degree: int) -> float:
    return math.log(2 * math.e * max_degree) + 0.5


def tail_bound(region_size: int, m: int, c: float, max_degree: int) -> float:
    """``|A| exp(-(c - c0)(m + 1))`` (prefactor one).

    Raises
    ------
    NoCertificateError
        If ``c <= c0``.
    """
    c0 = _c0(max_degree)
    if not c > c0:
        raise NoCertificateError(
            f"no convergence certificate: decay rate {c:.4g} <= c0 = {c0:.4g}"
        )
    if math.isinf(c):
        return 0.0
    return region_size * math.exp(-(c - c0) * (m + 1))


def _safe_tail(region_size: int, m: int, c: float, max_degree: int) -> float | None:
    try:
        return tail_bound(region_size, m, c, max_degree)
    except NoCertificateError:
        return None


# ---------------------------------------------------------------------- #
# free energy
# ---------------------------------------------------------------------- #


@dataclass(frozen=True)
class ClusterTerm:
    cluster: Cluster
    phi: Fraction
    z_w: complex

    @property
    def value(self) -> complex:
        return float(self.phi) * self.z_w

    def to_json(self) -> dict:
        return {
            "cluster": self.cluster.to_json(),
            "phi": f"{self.phi.numerator}/{self.phi.denominator}",
            "z_w": [float(self.z_w.real), float(self.z_w.imag)],
        }


def _sum_terms(terms: Iterable[ClusterTerm]) -> complex:
    total = 0j
    for t in terms:
        total += t.value
    return total


@dataclass
class ExpansionReport:
    """Truncated cluster expansion of ``log Z`` and its certificate."""

    log_z_bp: float
    order: int
    terms: list[ClusterTerm]
    f_m: float
    c_hat: float
    c0: float
    tail_bound: float | None
    loop_values: list[tuple[Loop, complex]] = field(default_factory=list)

    @property
    def certified(self) -> bool:
        return self.tail_bound is not None

    def recompute_f_m(self) -> float:
        return float((self.log_z_bp + _sum_terms(self.terms)).real)

    def to_json(self) -> dict:
        return {
            "log_z_bp": self.log_z_bp,
            "order": self.order,
            "terms": [t.to_json() for t in self.terms],
            "f_m": self.f_m,
            "tail_bound": self.tail_bound,
            "certified": self.certified,
            "c_hat": None if math.isinf(self.c_hat) else self.c_hat,
            "decay": "all loops below floor" if math.isinf(self.c_hat) else "measured",
            "c0": self.c0,
            "n_loops": len(self.loop_values),
        }


def free_energy(
    p: PepsNetwork,
    mu: MessageSet,
    norm: BpNormalization,
    m: int,
    counter: MultiplyCounter | None = None,
) -> ExpansionReport:
    """``F_m = log Z_BP + sum_{|W| <= m} phi(W) Z_W`` over connected clusters."""
    g = p.graph
    ev = LoopEvaluator(p, mu, norm, counter)
    loops = enumerate_loops(g, m)
    acts = {l: ev.activity(l) for l in loops}
    terms = []
    for c in enumerate_clusters(loops, m):
        z = 1.0 + 0j
        for l, a in c.items:
            z *= acts[l] ** a
        terms.append(ClusterTerm(c, ursell(c), z))
    c_hat = decay_rate((l.weight, z) for l, z in acts.items())
    c0 = _c0(max(g.max_degree, 1))
    f_m = float((norm.log_z_bp + _sum_terms(terms)).real)
    return ExpansionReport(
        log_z_bp=norm.log_z_bp,
        order=m,
        terms=terms,
        f_m=f_m,
        c_hat=c_hat,
        c0=c0,
        tail_bound=_safe_tail(g.n, m, c_hat, max(g.max_degree, 1)),
        loop_values=list(acts.items()),
    )


# ---------------------------------------------------------------------- #
# observables
# ---------------------------------------------------------------------- #


@dataclass
class ObservableEstimate:
    """Cluster-corrected observable or correlator with its certificate.

    ``certificate`` is ``None`` when the achieved decay rate does not beat
    ``c0``; ``relative`` tells whether it bounds the relative or the
    absolute error.
    """

    value: complex
    bp_value: complex
    order: int
    method: str
    c_hat: float
    c0: float
    certificate: float | None
    relative: bool
    terms: list[ClusterTerm] = field(default_factory=list)
    skipped: int = 0
    note: str = ""

    @property
    def certified(self) -> bool:
        return self.certificate is not None

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "value": [float(self.value.real), float(self.value.imag)],
            "bp_value": [float(self.bp_value.real), float(self.bp_value.imag)],
            "order": self.order,
            "c_hat": None if math.isinf(self.c_hat) else self.c_hat,
            "c0": self.c0,
            "certificate": self.certificate,
            "certificate_kind": "relative" if self.relative else "absolute",
            "certified": self.certified,
            "n_terms": len(self.terms),
            "skipped": self.skipped,
            "note": self.note,
        }


def _ops_dict(op, region: Iterable[int], d: int) -> dict[int, np.ndarray]:
    region = sorted(set(region))
    if not region:
        raise ValueError("region must be nonempty")
    if isinstance(op, Mapping):
        ops = {int(k): np.asarray(v, dtype=complex) for k, v in op.items()}
        if sorted(ops) != region:
            raise ValueError("operator keys must match the region")
    else:
        arr = None if isinstance(op, (list, tuple)) else np.asarray(op, dtype=complex)
        if arr is not None and arr.ndim == 2:
            ops = {v: arr for v in region}
        else:
            mats = [np.asarray(o, dtype=complex) for o in op]
            if len(mats) != len(region):
                raise ValueError("need one operator per region site")
            ops = dict(zip(region, mats))
    for v, o in ops.items():
        if o.shape != (d, d):
            raise ValueError(f"operator at {v} must have shape ({d}, {d})")
    return ops


def multiplicative_terms(
    ev: LoopEvaluator,
    clusters: Sequence[Cluster],
    ops: Mapping[int, np.ndarray],
    betas: Mapping[int, complex],
    cache: dict | None = None,
) -> tuple[list[ClusterTerm], dict]:
    """Terms ``phi(W) (Z^A_W - Z_W)`` for clusters touching the operator support.

    Dressed activities are normalized by the dressed vertex values, which
    is a division of the undressed-normalized value by ``prod beta_w``.
    ``cache`` maps loops to ``(Z_l, Z^A_l)`` and is filled in place.
    """
    cache = {} if cache is None else cache
    region = set(ops)
    terms = []
    for c in clusters:
        if not c.touches(region):
            continue
        za = 1.0 + 0j
        z = 1.0 + 0j
        for l, a in c.items:
            if l not in cache:
                zl = ev.activity(l)
                inside = {v: ops[v] for v in l.vertices if v in region}
                if inside:
                    zla = ev.activity(l, inside)
                    for v in inside:
                        zla /= betas[v]
                else:
                    zla = zl
                cache[l] = (zl, zla)
            zl, zla = cache[l]
            za *= zla**a
            z *= zl**a
        terms.append(ClusterTerm(c, ursell(c), za - z))
    return terms, cache


def expectation_multiplicative(
    p: PepsNetwork,
    mu: MessageSet,
    norm: BpNormalization,
    op,
    region: Iterable[int],
    m: int,
    counter: MultiplyCounter | None = None,
) -> ObservableEstimate:
    """``<O_A>_BP * exp(sum_W phi(W) (Z^A_W - Z_W))`` over clusters of anchored loops.

    ``op`` is a single ``d x d`` matrix (applied on every site of the
    region), a sequence aligned with ``sorted(region)``, or a mapping
    ``{vertex: matrix}``.

    Raises
    ------
    SmallEstimateError
        If ``|<O_A>_BP|`` is below :data:`BP_GUARD`; use the additive variant.
    """
    g = p.graph
    ops = _ops_dict(op, region, p.phys_dim)
    ev = LoopEvaluator(p, mu, norm, counter)
    betas = {v: ev.beta(v, o) for v, o in ops.items()}
    bp_val = complex(np.prod(list(betas.values())))
    if abs(bp_val) < BP_GUARD:
        raise SmallEstimateError(
            f"|<O>_BP| = {abs(bp_val):.3e} is below the guard; use the additive expansion"
        )
    loops = enumerate_anchored_loops(g, [sorted(ops)], m)
    clusters = enumerate_clusters(loops, m)
    terms, cache = multiplicative_terms(ev, clusters, ops, betas)
    corr = _sum_terms(terms)
    vals = [(l.weight, z) for l, pair in cache.items() for z in pair]
    c_hat = decay_rate(vals)
    Delta = max(g.max_degree, 1)
    return ObservableEstimate(
        value=bp_val * np.exp(corr),
        bp_value=bp_val,
        order=m,
        method="multiplicative",
        c_hat=c_hat,
        c0=_c0(Delta),
        certificate=_safe_tail(len(ops), m, c_hat, Delta),
        relative=True,
        terms=terms,
    )


def _single_site(region: Iterable[int], what: str) -> int:
    r = sorted(set(region))
    if len(r) != 1:
        raise ValueError(f"{what} supports single-site regions only")
    return r[0]


def _as_matrix(op, d: int) -> np.ndarray:
    if isinstance(op, Mapping):
        (op,) = op.values()
    arr = np.asarray(op, dtype=complex)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.shape != (d, d):
        raise ValueError(f"operator must have shape ({d}, {d})")
    return arr


def _mul4(x: tuple, y: tuple) -> tuple:
    """Product of truncated numbers ``c0 + ca a + cb b + cab ab``."""
    return (
        x[0] * y[0],
        x[0] * y[1] + x[1] * y[0],
        x[0] * y[2] + x[2] * y[0],
        x[0] * y[3] + x[3] * y[0] + x[1] * y[2] + x[2] * y[1],
    )


def _loop_jet(ev: LoopEvaluator, l: Loop, a: int | None, oa, ba, b: int | None, ob, bb):
    """Truncated expansion of a loop activity in the insertion strengths.

    The dressed activity at strengths ``(la, lb)`` is
    ``(z + la z_a + lb z_b + la lb z_ab) / ((1 + la ba)(1 + lb bb))``
    restricted to the terms that matter for the first mixed derivative.
    """
    z = ev.activity(l)
    has_a = a is not None and a in l.vertices
    has_b = b is not None and b in l.vertices
    za = ev.activity(l, {a: oa}) if has_a else 0j
    zb = ev.activity(l, {b: ob}) if has_b else 0j
    zab = ev.activity(l, {a: oa, b: ob}) if (has_a and has_b) else 0j
    da = za - ba * z if has_a else 0j
    db = zb - bb * z if has_b else 0j
    # factored so that an identity on either side cancels exactly
    dab = ((zab - bb * za) - ba * (zb - bb * z)) if (has_a and has_b) else 0j
    return (z, da, db, dab)


def expectation_additive(
    p: PepsNetwork,
    mu: MessageSet,
    norm: BpNormalization,
    op,
    region: Iterable[int],
    m: int,
    counter: MultiplyCounter | None = None,
) -> ObservableEstimate:
    """``<O>_BP + sum_W phi(W) d/dl Z_{W,l}`` for a single-site operator.

    The derivative of each cluster is taken with the product rule over
    loop occurrences, so no ratio of activities is ever formed and no
    cluster needs to be skipped when an activity vanishes.
    """
    g = p.graph
    a = _single_site(region, "the additive expansion")
    oa = _as_matrix(op, p.phys_dim)
    ev = LoopEvaluator(p, mu, norm, counter)
    beta = ev.beta(a, oa)
    loops = enumerate_anchored_loops(g, [[a]], m)
    clusters = [c for c in enumerate_clusters(loops, m) if c.touches([a])]
    jets: dict[Loop, tuple] = {}
    terms = []
    for c in clusters:
        acc = (1.0 + 0j, 0j, 0j, 0j)
        for l, k in c.items:
            if l not in jets:
                jets[l] = _loop_jet(ev, l, a, oa, beta, None, None, 0j)
            for _ in range(k):
                acc = _mul4(acc, jets[l])
        terms.append(ClusterTerm(c, ursell(c), acc[1]))
    vals = [(l.weight, j[0]) for l, j in jets.items()]
    vals += [(l.weight, j[1] + beta * j[0]) for l, j in jets.items()]
    c_hat = decay_rate(vals)
    Delta = max(g.max_degree, 1)
    tb = _safe_tail(1, m, c_hat, Delta)
    return ObservableEstimate(
        value=beta + _sum_terms(terms),
        bp_value=beta,
        order=m,
        method="additive",
        c_hat=c_hat,
        c0=_c0(Delta),
        certificate=None if tb is None else max(m, 1) * tb,
        relative=False,
        terms=terms,
    )


def connected_correlator(
    p: PepsNetwork,
    mu: MessageSet,
    norm: BpNormalization,
    op_a,
    region_a: Iterable[int],
    op_b,
    region_b: Iterable[int],
    m: int,
    counter: MultiplyCounter | None = None,
) -> ObservableEstimate:
    """Connected correlator of two single-site operators.

    Sums ``phi(W)`` times the mixed derivative of ``Z_W`` over clusters of
    loops anchored at both sites that touch both sites. Returns zero when
    the sites are farther apart than the truncation order.
    """
    g = p.graph
    a = _single_site(region_a, "the correlator expansion")
    b = _single_site(region_b, "the correlator expansion")
    if a == b:
        raise ValueError("regions must be disjoint")
    d = p.phys_dim
    oa, ob = _as_matrix(op_a, d), _as_matrix(op_b, d)
    ev = LoopEvaluator(p, mu, norm, counter)
    ba = ev.beta(a, oa)
    bb = ev.beta(b, ob)
    Delta = max(g.max_degree, 1)
    c0 = _c0(Delta)
    dist = region_distance(g, [a], [b])
    if dist > m:
        return ObservableEstimate(
            value=0j,
            bp_value=0j,
            order=m,
            method="correlator",
            c_hat=math.inf,
            c0=c0,
            certificate=None,
            relative=False,
            note=f"d(A,B) = {dist} exceeds the order; value set to zero by the clustering bound",
        )
    loops = enumerate_anchored_loops(g, [[a], [b]], m)
    clusters = [c for c in enumerate_clusters(loops, m) if c.touches([a]) and c.touches([b])]
    jets: dict[Loop, tuple] = {}
    terms = []
    for c in clusters:
        acc = (1.0 + 0j, 0j, 0j, 0j)
        for l, k in c.items:
            if l not in jets:
                jets[l] = _loop_jet(ev, l, a, oa, ba, b, ob, bb)
            for _ in range(k):
                acc = _mul4(acc, jets[l])
        terms.append(ClusterTerm(c, ursell(c), acc[3]))
    vals = [(l.weight, j[0]) for l, j in jets.items()]
    c_hat = decay_rate(vals)
    tb = _safe_tail(2, m, c_hat, Delta)
    return ObservableEstimate(
        value=_sum_terms(terms),
        bp_value=0j,
        order=m,
        method="correlator",
        c_hat=c_hat,
        c0=c0,
        certificate=None if tb is None else max(m, 1) ** 2 * tb,
        relative=False,
        terms=terms,
    )
