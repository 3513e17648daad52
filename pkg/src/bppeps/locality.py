"""Local perturbation experiments and incremental observable updates."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .bp import (
    ConvergenceLog,
    MessageSet,
    compute_thresholds,
    converge_restricted,
    find_fixed_point,
    q_rate,
    seeded_iterate,
)
from .clusters import (
    ClusterTerm,
    _c0,
    _ops_dict,
    _sum_terms,
    decay_rate,
    enumerate_clusters,
    multiplicative_terms,
)
from .errors import ConvergenceError, SmallEstimateError, StabilityError
from .graph import enumerate_anchored_loops, region_distance
from .loops import BpNormalization, LoopEvaluator, bp_normalization, update_normalization
from .peps import PepsNetwork, measure_injectivity, perturb_site, stability_margin
from .tensors import MultiplyCounter, hermitian_part, trace_norm_hermitian

__all__ = [
    "PerturbationTrace",
    "ObservableCache",
    "IncrementalUpdatePlan",
    "run_perturbation_experiment",
    "check_stability",
    "compute_observable",
    "incremental_observable_update",
    "observable_locality_sweep",
    "SweepResult",
    "fit_decay_rate",
    "FIT_FLOOR",
]

#: per-distance deltas below this value are excluded from rate fits
FIT_FLOOR = 1e-13


def fit_decay_rate(r: Sequence[float], values: Sequence[float]) -> float | None:
    """``-slope`` of a least-squares line through ``(r, log value)``.

    Points below :data:`FIT_FLOOR` are dropped; ``None`` if fewer than two
    points remain.
    """
    pts = [(x, math.log(y)) for x, y in zip(r, values) if y >= FIT_FLOOR]
    if len(pts) < 2 or len({x for x, _ in pts}) < 2:
        return None
    x = np.array([a for a, _ in pts], dtype=float)
    y = np.array([b for _, b in pts])
    slope = np.polyfit(x, y, 1)[0]
    return float(-slope)


def check_stability(p: PepsNetwork, region: Iterable[int], strength: float) -> None:
    """Raise :class:`StabilityError` if ``strength`` exceeds the Weyl guard."""
    rep = measure_injectivity(p)
    Delta = p.graph.max_degree
    for v in sorted(set(region)):
        margin = stability_margin(rep.delta_v[v], Delta)
        if not strength < margin and strength > 0:
            raise StabilityError(
                f"strength {strength:g} at vertex {v} exceeds the injectivity "
                f"stability bound {max(margin, 0.0):.6g}; use a smaller strength"
            )


@dataclass
class PerturbationTrace:
    """Message response to a local tensor perturbation.

    ``deltas[i]`` is the trace distance between old and new fixed-point
    messages on ``edges[i]``, and ``radii[i]`` the distance of that edge's
    source vertex to the perturbed region. ``lightcone_violations[t]``
    counts edges outside the distance-``t`` ball whose iterate under the
    new map differs in any bit from the iterate under the old map, both
    started at the old fixed point.
    """

    region: tuple[int, ...]
    strength: float
    edges: list[tuple[int, int]]
    deltas: np.ndarray
    radii: np.ndarray
    lightcone_violations: list[int]
    stationary_reference: bool
    q: float
    envelope_constant: float
    envelope_floor: float
    epsilon: float
    epsilon_new: float
    eps_star: float
    max_shift: float
    fitted_rate: float | None
    inv_xi_star: float
    logs: dict = field(default_factory=dict)

    @property
    def max_by_radius(self) -> dict[int, float]:
        out: dict[int, float] = {}
        for r, d in zip(self.radii, self.deltas):
            if math.isinf(r):
                continue
            r = int(r)
            out[r] = max(out.get(r, 0.0), float(d))
        return dict(sorted(out.items()))

    def envelope(self, r: int) -> float:
        """``C q^(r-1)`` plus the fixed-point accuracy floor."""
        if self.q == 0:
            core = self.envelope_constant if r <= 1 else 0.0
        else:
            core = self.envelope_constant * self.q ** (r - 1)
        return core + self.envelope_floor

    @property
    def envelope_violations(self) -> int:
        return sum(1 for r, d in self.max_by_radius.items() if d > self.envelope(r))

    @property
    def total_lightcone_violations(self) -> int:
        return int(sum(self.lightcone_violations))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["r", "max_delta", "bound"])
        for r, d in self.max_by_radius.items():
            w.writerow([r, repr(d), repr(self.envelope(r))])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {
            "region": list(self.region),
            "strength": self.strength,
            "rows": [
                {"r": r, "max_delta": d, "bound": self.envelope(r)}
                for r, d in self.max_by_radius.items()
            ],
            "lightcone_violations": self.lightcone_violations,
            "stationary_reference": self.stationary_reference,
            "envelope_constant": self.envelope_constant,
            "envelope_floor": self.envelope_floor,
            "envelope_violations": self.envelope_violations,
            "q": self.q,
            "epsilon": self.epsilon,
            "epsilon_new": self.epsilon_new,
            "eps_star": self.eps_star,
            "max_singular_value_shift": self.max_shift,
            "fitted_rate": self.fitted_rate,
            "inv_xi_star": None if math.isinf(self.inv_xi_star) else self.inv_xi_star,
        }


def run_perturbation_experiment(
    p: PepsNetwork,
    region: Iterable[int],
    strength: float,
    tol: float = 1e-12,
    seed: int = 0,
    max_iter: int = 1000,
    base: tuple[MessageSet, ConvergenceLog] | None = None,
) -> PerturbationTrace:
    """Perturb ``region``, reconverge from the old fixed point and record the response.

    Raises
    ------
    StabilityError
        If the strength violates the injectivity stability guard.
    """
    g = p.graph
    region = tuple(sorted(set(region)))
    check_stability(p, region, strength)
    pert = perturb_site(p, region, strength, seed)
    p2 = pert.network
    rep_old = measure_injectivity(p)
    rep_new = measure_injectivity(p2)
    Delta = g.max_degree
    eps_star = 1.0 / (2 * Delta - 1)
    if strength > 0 and not rep_new.epsilon < eps_star:
        raise StabilityError("perturbed network left the contracting regime")

    mu0, log0 = base if base is not None else find_fixed_point(p, tol, max_iter)
    if p2 is p:
        mu1, log1 = mu0, log0
    else:
        mu1, log1 = find_fixed_point(p2, tol, max_iter, start=mu0)

    dist = g.region_distances(region)
    src = np.array([dist[v] for v, _ in g.directed_edges])
    steps = int(g.diameter) + 1 if not math.isinf(g.diameter) else g.n
    new_traj = seeded_iterate(p2, mu0, steps)
    ref_traj = seeded_iterate(p, mu0, steps)
    violations = []
    for t in range(steps + 1):
        outside = np.nonzero(src > t)[0]
        a = new_traj[t].data[outside]
        b = ref_traj[t].data[outside]
        bad = sum(1 for i in range(len(outside)) if a[i].tobytes() != b[i].tobytes())
        violations.append(bad)
    stationary = all(
        traj.data.tobytes() == mu0.data.tobytes() for traj in ref_traj
    )

    deltas = trace_norm_hermitian(hermitian_part(mu1.data - mu0.data))
    q = q_rate(Delta, max(rep_old.epsilon, rep_new.epsilon))
    C = float(deltas.max()) if deltas.size else 0.0
    floor = 2.0 * tol / max(1.0 - q, 1e-300) + 1e-14
    trace = PerturbationTrace(
        region=region,
        strength=float(strength),
        edges=list(g.directed_edges),
        deltas=deltas,
        radii=src,
        lightcone_violations=violations,
        stationary_reference=stationary,
        q=q,
        envelope_constant=C,
        envelope_floor=floor,
        epsilon=rep_old.epsilon,
        epsilon_new=rep_new.epsilon,
        eps_star=eps_star,
        max_shift=max(pert.max_shift.values()),
        fitted_rate=None,
        inv_xi_star=compute_thresholds(
            max(p.bond_dim, 2), max(Delta, 2), max(rep_old.epsilon, rep_new.epsilon)
        ).inv_xi_star,
        logs={"base": log0.to_json(), "perturbed": log1.to_json()},
    )
    mb = trace.max_by_radius
    trace.fitted_rate = fit_decay_rate(list(mb), list(mb.values())) if C > 0 else None
    return trace


# ---------------------------------------------------------------------- #
# observables with caching
# ---------------------------------------------------------------------- #


@dataclass
class ObservableCache:
    """Everything a full multiplicative-observable computation produced."""

    network: PepsNetwork
    ops: dict
    order: int
    tol: float
    mu: MessageSet
    log: ConvergenceLog
    norm: BpNormalization
    terms: list[ClusterTerm]
    loop_values: dict
    betas: dict
    value: complex
    c_hat: float
    multiplies: int

    @property
    def region(self) -> list[int]:
        return sorted(self.ops)


def _evaluate(
    p: PepsNetwork,
    mu: MessageSet,
    norm: BpNormalization,
    ops: dict,
    m: int,
    counter: MultiplyCounter,
    reuse: dict | None = None,
    near: set | None = None,
):
    """Multiplicative observable terms; clusters outside ``near`` reuse ``reuse``."""
    ev = LoopEvaluator(p, mu, norm, counter)
    betas = {v: ev.beta(v, o) for v, o in ops.items()}
    bp_val = complex(np.prod(list(betas.values())))
    if abs(bp_val) < 1e-10:
        raise SmallEstimateError("BP estimate below guard")
    loops = enumerate_anchored_loops(p.graph, [sorted(ops)], m)
    clusters = [c for c in enumerate_clusters(loops, m) if c.touches(ops)]
    if reuse is None:
        terms, cache = multiplicative_terms(ev, clusters, ops, betas)
        return terms, cache, betas, bp_val
    terms = []
    cache: dict = {}
    for c in clusters:
        key = c
        if c.support <= near:
            t, _ = multiplicative_terms(ev, [c], ops, betas, cache)
            terms.append(t[0])
        else:
            terms.append(reuse[key])
    return terms, cache, betas, bp_val


def compute_observable(
    p: PepsNetwork,
    op,
    region: Iterable[int],
    m: int,
    tol: float = 1e-12,
    max_iter: int = 1000,
    start: MessageSet | None = None,
) -> ObservableCache:
    """Full multiplicative cluster-corrected ``<O_B>`` from scratch."""
    ops = _ops_dict(op, region, p.phys_dim)
    counter = MultiplyCounter()
    mu, log = find_fixed_point(p, tol, max_iter, start=start, counter=counter)
    if not log.converged:
        raise ConvergenceError("message iteration did not converge")
    norm = bp_normalization(p, mu, counter)
    terms, cache, betas, bp_val = _evaluate(p, mu, norm, ops, m, counter)
    vals = [(l.weight, z) for l, pair in cache.items() for z in pair]
    return ObservableCache(
        network=p,
        ops=ops,
        order=m,
        tol=tol,
        mu=mu,
        log=log,
        norm=norm,
        terms=terms,
        loop_values=cache,
        betas=betas,
        value=bp_val * np.exp(_sum_terms(terms)),
        c_hat=decay_rate(vals),
        multiplies=counter.count,
    )


@dataclass
class IncrementalUpdatePlan:
    """What an incremental update recomputed and what it reused."""

    r_th: int
    message_radius: float
    edges_reconverged: int
    clusters_near: int
    clusters_far: int
    full_recompute: bool
    unchanged: bool
    multiplies: int
    baseline_multiplies: int
    certificate_near: float
    certificate_far: float | None

    @property
    def certificate(self) -> float | None:
        if self.certificate_far is None:
            return None
        return self.certificate_near + self.certificate_far

    def to_json(self) -> dict:
        return {
            "r_th": self.r_th,
            "message_radius": None if math.isinf(self.message_radius) else self.message_radius,
            "edges_reconverged": self.edges_reconverged,
            "clusters_near": self.clusters_near,
            "clusters_far": self.clusters_far,
            "full_recompute": self.full_recompute,
            "unchanged": self.unchanged,
            "multiplies": self.multiplies,
            "baseline_multiplies": self.baseline_multiplies,
            "certificate_near": self.certificate_near,
            "certificate_far": self.certificate_far,
            "certificate": self.certificate,
        }


def _changed_vertices(p: PepsNetwork, p2: PepsNetwork) -> list[int]:
    return [
        v
        for v in range(p.graph.n)
        if p.tensors[v].tobytes() != p2.tensors[v].tobytes()
    ]


def incremental_observable_update(
    cache: ObservableCache | None,
    p_new: PepsNetwork,
    region_a: Iterable[int],
    r_th: int | None = None,
    op=None,
    region_b: Iterable[int] | None = None,
    max_iter: int = 1000,
) -> tuple[complex, IncrementalUpdatePlan, ObservableCache]:
    """Update a cached ``<O_B>`` after the tensors on ``region_a`` changed.

    Messages are re-iterated from the cached fixed point only on directed
    edges whose source lies within ``r_th + buffer`` of ``A``, where the
    buffer ``ceil(log(1/tol) / log(1/q))`` keeps the leakage of the
    convergence tail below ``tol``. Clusters supported within ``r_th`` of
    ``B`` are re-evaluated; all other cluster terms come from the cache.
    When ``r_th`` reaches the graph diameter the update is the from-scratch
    computation itself.

    Returns
    -------
    value, plan, new_cache
    """
    region_a = sorted(set(region_a))
    if cache is None:
        if op is None or region_b is None:
            raise ValueError("without a cache, op and region_b are required")
        import warnings

        warnings.warn("no cached base run; falling back to full recomputation")
        fresh = compute_observable(p_new, op, region_b, 6)
        plan = IncrementalUpdatePlan(
            r_th=0, message_radius=math.inf, edges_reconverged=len(p_new.graph.directed_edges),
            clusters_near=len(fresh.terms), clusters_far=0, full_recompute=True,
            unchanged=False, multiplies=fresh.multiplies, baseline_multiplies=fresh.multiplies,
            certificate_near=0.0, certificate_far=0.0,
        )
        return fresh.value, plan, fresh
    p = cache.network
    g = p.graph
    region_b = cache.region
    changed = _changed_vertices(p, p_new)
    if not set(changed) <= set(region_a):
        raise ValueError(f"tensors changed outside region A: {sorted(set(changed) - set(region_a))}")
    R = region_distance(g, region_a, region_b)
    if r_th is None:
        r_th = int(math.ceil(R / 2))
    if not changed:
        plan = IncrementalUpdatePlan(
            r_th=r_th, message_radius=0, edges_reconverged=0, clusters_near=0,
            clusters_far=len(cache.terms), full_recompute=False, unchanged=True,
            multiplies=0, baseline_multiplies=cache.multiplies,
            certificate_near=0.0, certificate_far=0.0,
        )
        return cache.value, plan, cache
    if r_th >= g.diameter:
        fresh = compute_observable(p_new, cache.ops, region_b, cache.order, cache.tol, max_iter)
        plan = IncrementalUpdatePlan(
            r_th=r_th, message_radius=math.inf,
            edges_reconverged=len(g.directed_edges), clusters_near=len(fresh.terms),
            clusters_far=0, full_recompute=True, unchanged=False,
            multiplies=fresh.multiplies, baseline_multiplies=fresh.multiplies,
            certificate_near=0.0, certificate_far=0.0,
        )
        return fresh.value, plan, fresh

    eps = max(measure_injectivity(p).epsilon, measure_injectivity(p_new).epsilon)
    Delta = g.max_degree
    q = q_rate(Delta, eps)
    if q <= 0:
        buffer = 0
    elif q >= 1:
        buffer = g.n
    else:
        buffer = int(math.ceil(math.log(1.0 / cache.tol) / math.log(1.0 / q)))
    radius = r_th + buffer
    dist_a = g.region_distances(region_a)
    active = [i for i, (v, _) in enumerate(g.directed_edges) if dist_a[v] <= radius]

    counter = MultiplyCounter()
    mu, log = converge_restricted(
        p_new, cache.mu, active, cache.tol, max_iter, counter, changed=changed
    )
    if not log.converged:
        raise ConvergenceError("local message re-convergence did not converge")
    moved = np.nonzero(
        [a.tobytes() != b.tobytes() for a, b in zip(mu.data, cache.mu.data)]
    )[0]
    edges = {g.edge_index[tuple(sorted(g.directed_edges[i]))] for i in moved}
    norm = update_normalization(p_new, mu, cache.norm, changed, edges, counter)

    dist_b = g.region_distances(region_b)
    near = {v for v in range(g.n) if dist_b[v] <= r_th}
    reuse = {t.cluster: t for t in cache.terms}
    terms, loop_cache, betas, bp_val = _evaluate(
        p_new, mu, norm, cache.ops, cache.order, counter, reuse, near
    )
    n_near = sum(1 for t in terms if t.cluster.support <= near)
    value = bp_val * np.exp(_sum_terms(terms))

    inv_xi = compute_thresholds(max(p.bond_dim, 2), max(Delta, 2), eps).inv_xi_star
    cert_near = 0.0 if math.isinf(inv_xi) else math.exp(-(R - r_th) * inv_xi)
    c0 = _c0(max(Delta, 1))
    c = cache.c_hat
    if math.isinf(c):
        cert_far = 0.0
    elif c > c0:
        cert_far = len(region_b) * math.exp(-(c - c0) * r_th)
    else:
        cert_far = None
    plan = IncrementalUpdatePlan(
        r_th=r_th,
        message_radius=radius,
        edges_reconverged=len(active),
        clusters_near=n_near,
        clusters_far=len(terms) - n_near,
        full_recompute=False,
        unchanged=False,
        multiplies=counter.count,
        baseline_multiplies=cache.multiplies,
        certificate_near=cert_near,
        certificate_far=cert_far,
    )
    merged = dict(cache.loop_values)
    merged.update(loop_cache)
    new_cache = ObservableCache(
        network=p_new, ops=cache.ops, order=cache.order, tol=cache.tol, mu=mu,
        log=log, norm=norm, terms=terms, loop_values=merged, betas=betas,
        value=value, c_hat=c, multiplies=counter.count,
    )
    return value, plan, new_cache


# ---------------------------------------------------------------------- #
# sweeps
# ---------------------------------------------------------------------- #


@dataclass
class SweepResult:
    """Observable shifts per (strength, placement)."""

    rows: list[dict]
    fitted_rates: dict
    inv_xi_star: float
    c_minus_c0: float | None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["strength", "placement", "R", "shift", "bp_shift"])
        for r in self.rows:
            w.writerow([repr(r["strength"]), " ".join(map(str, r["placement"])), r["R"],
                        repr(r["shift"]), repr(r["bp_shift"])])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {
            "rows": self.rows,
            "fitted_rates": {repr(k): v for k, v in self.fitted_rates.items()},
            "inv_xi_star": None if math.isinf(self.inv_xi_star) else self.inv_xi_star,
            "c_minus_c0": self.c_minus_c0,
            "inv_xi_double_star": (
                None
                if self.c_minus_c0 is None
                else min(self.inv_xi_star, self.c_minus_c0)
            ),
        }


def default_placements(p: PepsNetwork, region_b: Iterable[int]) -> list[list[int]]:
    """One single-vertex region per distance from ``B`` (smallest vertex id)."""
    dist = p.graph.region_distances(region_b)
    out = {}
    for v in range(p.graph.n):
        d = dist[v]
        if d >= 1 and not math.isinf(d) and int(d) not in out:
            out[int(d)] = [v]
    return [out[k] for k in sorted(out)]


def observable_locality_sweep(
    p: PepsNetwork,
    strengths: Sequence[float],
    region_b: Iterable[int],
    op_b,
    m: int,
    placements: Sequence[Iterable[int]] | None = None,
    seed: int = 0,
    tol: float = 1e-12,
) -> SweepResult:
    """Shift of ``<O_B>`` under perturbations placed at growing distances."""
    region_b = sorted(set(region_b))
    placements = (
        default_placements(p, region_b)
        if placements is None
        else [sorted(set(a)) for a in placements]
    )
    base = compute_observable(p, op_b, region_b, m, tol)
    g = p.graph
    rows = []
    for s in strengths:
        for a in placements:
            if set(a) & set(region_b):
                raise ValueError("placements must be disjoint from B")
            check_stability(p, a, s)
            p2 = perturb_site(p, a, s, seed).network
            if p2 is p:
                other = base
            else:
                other = compute_observable(p2, base.ops, region_b, m, tol, start=base.mu)
            bp_old = complex(np.prod(list(base.betas.values())))
            bp_new = complex(np.prod(list(other.betas.values())))
            rows.append(
                {
                    "strength": float(s),
                    "placement": list(a),
                    "R": int(region_distance(g, a, region_b)),
                    "shift": float(abs(other.value - base.value)),
                    "bp_shift": float(abs(bp_new - bp_old)),
                }
            )
    rates = {}
    for s in strengths:
        sel = [r for r in rows if r["strength"] == float(s)]
        rates[float(s)] = fit_decay_rate([r["R"] for r in sel], [r["shift"] for r in sel])
    eps = measure_injectivity(p).epsilon
    Delta = g.max_degree
    th = compute_thresholds(max(p.bond_dim, 2), max(Delta, 2), eps)
    c0 = _c0(max(Delta, 1))
    cm = None if math.isinf(base.c_hat) else base.c_hat - c0
    return SweepResult(rows, rates, th.inv_xi_star, cm)
