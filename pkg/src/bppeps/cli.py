"""Command-line interface.

Every subcommand writes a JSON report (schema ``bppeps/1``) that embeds
the resolved configuration and a SHA-256 hash of the input files, so that
repeated runs are byte-identical. Exit codes: 0 success, 2 configuration
or feasibility error, 3 non-convergence, 4 stability guard, 5 oracle
budget.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Sequence

import numpy as np

from . import __version__
from .bp import compute_thresholds, find_fixed_point
from .clusters import (
    connected_correlator,
    expectation_additive,
    expectation_multiplicative,
    free_energy,
)
from .errors import BppepsError, InfeasibleError, OracleBudgetError
from .graph import Graph, graph_from_spec
from .locality import (
    compute_observable,
    incremental_observable_update,
    run_perturbation_experiment,
)
from .loops import bp_normalization
from .oracle import DEFAULT_BUDGET, exact_connected_correlator, exact_expectation, exact_norm
from .peps import PepsNetwork, generate_random_peps, measure_injectivity, perturb_site
from .rng import RNG_NAME
from .tensors import tensor_from_json

SCHEMA = "bppeps/1"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NONCONVERGED = 3
EXIT_STABILITY = 4
EXIT_BUDGET = 5


# ---------------------------------------------------------------------- #
# helpers
# ---------------------------------------------------------------------- #


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n"


def _clean(x):
    """Replace non-finite floats so reports stay strict JSON."""
    if isinstance(x, float):
        return x if math.isfinite(x) else None
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.floating):
        return _clean(float(x))
    if isinstance(x, np.integer):
        return int(x)
    return x


def _write(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


def _hash_files(paths: Sequence[str | None]) -> str:
    h = hashlib.sha256()
    for p in paths:
        if p is None:
            continue
        with open(p, "rb") as fh:
            h.update(hashlib.sha256(fh.read()).digest())
    return h.hexdigest()


def _config(args) -> dict:
    skip = {"func"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _report(args, inputs: Sequence[str | None], body: dict) -> dict:
    return _clean(
        {
            "schema": SCHEMA,
            "version": __version__,
            "command": args.command,
            "config": _config(args),
            "input_hash": _hash_files(inputs),
            "rng": RNG_NAME,
            **body,
        }
    )


def _region(text: str | None) -> list[int]:
    if text is None:
        return []
    try:
        return sorted({int(x) for x in text.replace(" ", "").split(",") if x})
    except ValueError as exc:
        raise InfeasibleError(f"malformed region {text!r}") from exc


def _load_network(path: str) -> PepsNetwork:
    with open(path, encoding="utf-8") as fh:
        return PepsNetwork.from_json(json.load(fh))


def _load_matrix(path: str) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        m = tensor_from_json(json.load(fh))
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise InfeasibleError("operator file must hold a square matrix")
    return m


def _graph(args) -> Graph:
    if getattr(args, "graph_file", None):
        with open(args.graph_file, encoding="utf-8") as fh:
            return Graph.from_json(json.load(fh))
    if not args.graph:
        raise InfeasibleError("either --graph or --graph-file is required")
    try:
        return graph_from_spec(args.graph)
    except ValueError as exc:
        raise InfeasibleError(str(exc)) from exc


def _threads(args) -> int:
    t = getattr(args, "threads", None)
    if t is None:
        t = int(os.environ.get("BPPEPS_THREADS", "1") or 1)
    return max(1, int(t))


def _complex(z) -> list[float]:
    z = complex(z)
    return [z.real, z.imag]


def _converge(p: PepsNetwork, args):
    mu, log = find_fixed_point(p, args.tol, args.max_iter)
    return mu, log


# ---------------------------------------------------------------------- #
# subcommands
# ---------------------------------------------------------------------- #


def cmd_generate(args) -> int:
    g = _graph(args)
    p = generate_random_peps(g, args.bond_dim, args.seed, args.epsilon, args.phys_dim)
    rep = measure_injectivity(p)
    _write(args.out, _dump(p.to_json()))
    _say(
        f"generated N={g.n} |E|={len(g.edges)} Delta={g.max_degree} D={p.bond_dim} "
        f"d={p.phys_dim}; measured epsilon={rep.epsilon:.6g} delta={rep.delta:.6g}"
    )
    return EXIT_OK


def _thresholds_for(p: PepsNetwork):
    rep = measure_injectivity(p)
    g = p.graph
    th = compute_thresholds(max(p.bond_dim, 2), max(g.max_degree, 2), min(rep.epsilon, 1 - 1e-15))
    return rep, th


def cmd_contract(args) -> int:
    p = _load_network(args.network)
    rep, th = _thresholds_for(p)
    mu, log = _converge(p, args)
    body = {
        "injectivity": rep.to_json(),
        "thresholds": th.to_json(),
        "guaranteed_regime": rep.epsilon < th.eps_star,
        "convergence": log.to_json(),
        "converged": log.converged,
    }
    if not log.converged:
        _write(args.out, _dump(_report(args, [args.network], body)))
        _say("message passing did not converge")
        return EXIT_NONCONVERGED
    norm = bp_normalization(p, mu)
    exp = free_energy(p, mu, norm, args.order)
    body["expansion"] = exp.to_json()
    bound_base = th.eta
    Delta = max(p.graph.max_degree, 1)
    body["loops"] = [
        {
            "edges": [list(e) for e in l.edges],
            "weight": l.weight,
            "value": _complex(z),
            "bound": bound_base ** (2 * l.weight / Delta),
        }
        for l, z in exp.loop_values
    ]
    if args.oracle:
        z = exact_norm(p, budget=args.oracle_budget)
        log_z = math.log(z.value.real)
        body["oracle"] = {
            **z.to_json(),
            "log_z": log_z,
            "abs_error_log_z": abs(exp.f_m - log_z),
            "rel_error_z": abs(math.expm1(exp.f_m - log_z)),
        }
    _write(args.out, _dump(_report(args, [args.network], body)))
    _say(
        f"log Z_BP={norm.log_z_bp:.6g} F_{args.order}={exp.f_m:.6g} "
        f"certified={exp.certified}"
    )
    return EXIT_OK


def cmd_observe(args) -> int:
    p = _load_network(args.network)
    op = _load_matrix(args.op)
    region = _region(args.region)
    if not region:
        raise InfeasibleError("--region is required")
    mu, log = _converge(p, args)
    body = {"convergence": log.to_json(), "converged": log.converged}
    if not log.converged:
        _write(args.out, _dump(_report(args, [args.network, args.op], body)))
        return EXIT_NONCONVERGED
    norm = bp_normalization(p, mu)
    try:
        body["multiplicative"] = expectation_multiplicative(
            p, mu, norm, op, region, args.order
        ).to_json()
    except BppepsError as exc:
        body["multiplicative"] = {"skipped": True, "note": str(exc)}
    if len(region) == 1:
        body["additive"] = expectation_additive(p, mu, norm, op, region, args.order).to_json()
    else:
        body["additive"] = {"skipped": True, "note": "additive form needs a single site"}
    if args.oracle:
        body["oracle"] = exact_expectation(
            p, op, region, budget=args.oracle_budget
        ).to_json()
    _write(args.out, _dump(_report(args, [args.network, args.op], body)))
    return EXIT_OK


def cmd_correlate(args) -> int:
    p = _load_network(args.network)
    op_a, op_b = _load_matrix(args.op_a), _load_matrix(args.op_b)
    ra, rb = _region(args.region_a), _region(args.region_b)
    mu, log = _converge(p, args)
    body = {"convergence": log.to_json(), "converged": log.converged}
    inputs = [args.network, args.op_a, args.op_b]
    if not log.converged:
        _write(args.out, _dump(_report(args, inputs, body)))
        return EXIT_NONCONVERGED
    norm = bp_normalization(p, mu)
    body["correlator"] = connected_correlator(
        p, mu, norm, op_a, ra, op_b, rb, args.order
    ).to_json()
    if args.oracle:
        body["oracle"] = exact_connected_correlator(
            p, op_a, ra, op_b, rb, budget=args.oracle_budget
        ).to_json()
    _write(args.out, _dump(_report(args, inputs, body)))
    return EXIT_OK


def cmd_perturb(args) -> int:
    p = _load_network(args.network)
    ra = _region(args.region_a)
    if not ra:
        raise InfeasibleError("--region-a is required")
    inputs = [args.network, args.op_b]
    trace = run_perturbation_experiment(
        p, ra, args.strength, args.tol, args.perturb_seed, args.max_iter
    )
    body = {"trace": trace.to_json(), "lightcone_ok": trace.total_lightcone_violations == 0}
    if args.op_b is not None:
        rb = _region(args.region_b)
        op = _load_matrix(args.op_b)
        base = compute_observable(p, op, rb, args.order, args.tol, args.max_iter)
        p2 = perturb_site(p, ra, args.strength, args.perturb_seed).network
        value, plan, _ = incremental_observable_update(base, p2, ra, args.r_th)
        fresh = compute_observable(p2, op, rb, args.order, args.tol, args.max_iter)
        body["update"] = {
            "base_value": _complex(base.value),
            "incremental_value": _complex(value),
            "from_scratch_value": _complex(fresh.value),
            "abs_difference": abs(value - fresh.value),
            "plan": plan.to_json(),
            "from_scratch_multiplies": fresh.multiplies,
            "savings_ratio": plan.multiplies / fresh.multiplies if fresh.multiplies else None,
        }
    _write(args.out, _dump(_report(args, inputs, body)))
    _say(f"lightcone violations: {trace.total_lightcone_violations}")
    return EXIT_OK


def _scan_one(task):
    g, D, eps, seed, order, oracle, tol, max_iter, budget = task
    p = generate_random_peps(g, D, seed, eps)
    mu, log = find_fixed_point(p, tol, max_iter)
    row = {
        "seed": seed,
        "converged": log.converged,
        "iterations": log.iterations,
        "max_ratio": max(log.ratios, default=None),
    }
    if not log.converged:
        return row
    try:
        norm = bp_normalization(p, mu)
    except BppepsError:
        row["ill_conditioned"] = True
        return row
    exp = free_energy(p, mu, norm, order)
    row["c_hat"] = None if math.isinf(exp.c_hat) else exp.c_hat
    row["certified"] = exp.certified
    if oracle:
        try:
            z = exact_norm(p, budget=budget)
            row["rel_error"] = abs(math.expm1(exp.f_m - math.log(z.value.real)))
        except OracleBudgetError:
            row["rel_error"] = None
    return row


def cmd_scan(args) -> int:
    g = _graph(args)
    try:
        eps_grid = [float(x) for x in args.epsilons.split(",") if x]
    except ValueError as exc:
        raise InfeasibleError("malformed --epsilons") from exc
    Delta = max(g.max_degree, 2)
    rows = []
    with ThreadPoolExecutor(max_workers=_threads(args)) as pool:
        for eps in eps_grid:
            th = compute_thresholds(max(args.bond_dim, 2), Delta, eps)
            tasks = [
                (g, args.bond_dim, eps, args.seed + k, args.order, args.oracle, args.tol,
                 args.max_iter, args.oracle_budget)
                for k in range(args.ensemble)
            ]
            members = list(pool.map(_scan_one, tasks))
            ratios = [m["max_ratio"] for m in members if m.get("max_ratio") is not None]
            cs = [m.get("c_hat") for m in members if "c_hat" in m]
            finite_c = [c for c in cs if c is not None]
            errs = [m["rel_error"] for m in members if m.get("rel_error") is not None]
            rows.append(
                {
                    "epsilon": eps,
                    "q": th.q,
                    "c0": th.c0,
                    "below_eps_star": eps < th.eps_star,
                    "below_eps_double_star": eps < th.eps_double_star,
                    "convergence_certified": th.q < 1,
                    "all_converged": all(m["converged"] for m in members),
                    "max_ratio": max(ratios, default=None),
                    "min_c_hat": min(finite_c, default=None),
                    "decay": (
                        "all loops below floor"
                        if cs and all(c is None for c in cs)
                        else "measured"
                    ),
                    "max_rel_error": max(errs, default=None),
                    "members": members,
                }
            )
    th0 = compute_thresholds(max(args.bond_dim, 2), Delta, 0.0)
    body = {"eps_star": th0.eps_star, "eps_double_star": th0.eps_double_star, "rows": rows}
    if args.format == "csv":
        lines = [
            "epsilon,q,max_ratio,all_converged,min_c_hat,c0,decay,max_rel_error,"
            "below_eps_star,below_eps_double_star"
        ]
        for r in rows:
            vals = [
                r["epsilon"], r["q"], r["max_ratio"], r["all_converged"], r["min_c_hat"],
                r["c0"], r["decay"], r["max_rel_error"], r["below_eps_star"],
                r["below_eps_double_star"],
            ]
            lines.append(",".join("" if v is None else repr(v) if isinstance(v, float) else str(v) for v in vals))
        _write(args.out, "\n".join(lines) + "\n")
    else:
        _write(args.out, _dump(_report(args, [args.graph_file], body)))
    return EXIT_OK


# ---------------------------------------------------------------------- #
# parser
# ---------------------------------------------------------------------- #


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="bppeps",
        description="Belief-propagation contraction of injective PEPS.",
    )
    ap.add_argument("--version", action="version", version=f"bppeps {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(sp, network=True):
        if network:
            sp.add_argument("--network", required=True, help="network JSON file")
        sp.add_argument("--out", default=None, help="output path (default stdout)")
        sp.add_argument("--tol", type=float, default=1e-12)
        sp.add_argument("--max-iter", type=int, default=1000)
        sp.add_argument("--threads", type=int, default=None)

    sp = sub.add_parser("generate", help="write a random injective PEPS")
    sp.add_argument("--graph")
    sp.add_argument("--graph-file")
    sp.add_argument("--bond-dim", type=int, default=2)
    sp.add_argument("--phys-dim", type=int, default=None)
    sp.add_argument("--epsilon", type=float, default=0.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default=None)
    sp.add_argument("--threads", type=int, default=None)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("contract", help="BP plus cluster-corrected log Z")
    common(sp)
    sp.add_argument("--order", type=int, default=6)
    sp.add_argument("--oracle", action="store_true")
    sp.add_argument("--oracle-budget", type=float, default=DEFAULT_BUDGET)
    sp.set_defaults(func=cmd_contract)

    sp = sub.add_parser("observe", help="local expectation value")
    common(sp)
    sp.add_argument("--op", required=True, help="matrix JSON file")
    sp.add_argument("--region", required=True, help="comma-separated vertices")
    sp.add_argument("--order", type=int, default=6)
    sp.add_argument("--oracle", action="store_true")
    sp.add_argument("--oracle-budget", type=float, default=DEFAULT_BUDGET)
    sp.set_defaults(func=cmd_observe)

    sp = sub.add_parser("correlate", help="connected two-site correlator")
    common(sp)
    sp.add_argument("--op-a", required=True)
    sp.add_argument("--region-a", required=True)
    sp.add_argument("--op-b", required=True)
    sp.add_argument("--region-b", required=True)
    sp.add_argument("--order", type=int, default=6)
    sp.add_argument("--oracle", action="store_true")
    sp.add_argument("--oracle-budget", type=float, default=DEFAULT_BUDGET)
    sp.set_defaults(func=cmd_correlate)

    sp = sub.add_parser("perturb", help="local perturbation and incremental update")
    common(sp)
    sp.add_argument("--region-a", required=True)
    sp.add_argument("--strength", type=float, required=True)
    sp.add_argument("--perturb-seed", type=int, default=0)
    sp.add_argument("--op-b", default=None)
    sp.add_argument("--region-b", default=None)
    sp.add_argument("--r-th", type=int, default=None)
    sp.add_argument("--order", type=int, default=6)
    sp.set_defaults(func=cmd_perturb)

    sp = sub.add_parser("scan", help="sweep epsilon over a random ensemble")
    sp.add_argument("--graph")
    sp.add_argument("--graph-file")
    sp.add_argument("--bond-dim", type=int, default=2)
    sp.add_argument("--epsilons", default="0,0.01,0.03,0.05,0.1,0.2,0.3")
    sp.add_argument("--ensemble", type=int, default=3)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--order", type=int, default=6)
    sp.add_argument("--oracle", action="store_true")
    sp.add_argument("--oracle-budget", type=float, default=DEFAULT_BUDGET)
    sp.add_argument("--format", choices=["json", "csv"], default="json")
    sp.add_argument("--out", default=None)
    sp.add_argument("--tol", type=float, default=1e-12)
    sp.add_argument("--max-iter", type=int, default=1000)
    sp.add_argument("--threads", type=int, default=None)
    sp.set_defaults(func=cmd_scan)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "perturb" and (args.op_b is None) != (args.region_b is None):
        _say("--op-b and --region-b must be given together")
        return EXIT_CONFIG
    try:
        return args.func(args)
    except BppepsError as exc:
        _say(f"error: {exc}")
        return exc.exit_code
    except (ValueError, FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
        _say(f"error: {exc}")
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
