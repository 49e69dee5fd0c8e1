"""Command-line front end: ``solve``, ``grid``, ``bench`` and ``check``.

Exit codes: 0 success, 1 input or structural error, 2 no convergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .demand import (ODMatrix, gravity_demand, parse_tntp_trips, scale_demand,
                     to_traveler_types, write_tntp_trips)
from .network import (Network, NetworkValidationError, generate_grid,
                      parse_tntp_network, validate_network, write_tntp_network)
from .oracle import kkt_check, recover_potentials
from .purc import ENTROPY, CostModel, bpr_time, length_scaled_entropy
from .solver import PLAIN_STEP_CANDIDATES, VARIANTS, SolverConfig, solve, solve_best_step

EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED = 0, 1, 2


class InputError(Exception):
    pass


@dataclass
class Instance:
    net: Network
    od: ODMatrix
    label: str


def _fmt(v) -> str:
    """Shortest round-trip text for floats, so CSVs are exact and stable."""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


# ---------------------------------------------------------------------------
# Argument parsing

def _add_instance_args(p: argparse.ArgumentParser):
    src = p.add_argument_group("instance (files or a generated grid)")
    src.add_argument("--net", type=Path, help="TNTP network file")
    src.add_argument("--trips", type=Path, help="TNTP trips file")
    src.add_argument("--grid", type=int, metavar="K", help="generate a K x K block grid")
    src.add_argument("--q", type=float, default=100.0,
                     help="gravity trips per origin for --grid (default 100)")
    src.add_argument("--scale", type=float, default=1.0, help="demand multiplier")


def _add_solver_args(p: argparse.ArgumentParser):
    s = p.add_argument_group("solver")
    s.add_argument("--variant", choices=VARIANTS, default="qn-agd-star")
    s.add_argument("--gamma1", type=float, default=0.5, help="potential step size")
    s.add_argument("--gamma2", type=float, default=1.0, help="link-time step size")
    s.add_argument("--alpha", type=float, default=10.0, help="momentum parameter")
    s.add_argument("--plain-step", type=float, default=1e-4,
                   help="step size of agd and agd-star")
    s.add_argument("--eps1", type=float, default=1e-5, help="R1 tolerance")
    s.add_argument("--eps2", type=float, default=1e-5, help="R2 tolerance")
    s.add_argument("--clip-iters", type=int, default=None,
                   help="iterations with flows capped at one (default 100 for qN variants, "
                        "all iterations for plain ones)")
    s.add_argument("--max-iters", type=int, default=100_000)
    s.add_argument("--trace-every", type=int, default=1)
    s.add_argument("--theta", type=float, default=0.5, help="cost per unit travel time")
    s.add_argument("--perturbation", choices=("entropy", "length-scaled"), default="entropy")
    s.add_argument("--backend", choices=("auto", "compiled", "python"), default="auto")
    s.add_argument("--seed", type=int, default=0,
                   help="seed recorded in the summary (only the oracle draws random numbers)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="purc-ta",
        description="Perturbed utility traffic assignment by dual accelerated gradient ascent.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="solve one assignment")
    _add_instance_args(p)
    _add_solver_args(p)
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.add_argument("--per-type-flows", action="store_true",
                   help="add one flow column per traveler type to flows.csv")
    p.add_argument("--no-timing", action="store_true",
                   help="write wall_ms as 0 so repeated runs give identical files")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("grid", help="write a grid network and gravity trips in TNTP format")
    p.add_argument("--k", type=int, required=True, help="blocks per side")
    p.add_argument("--q", type=float, required=True, help="trips per origin")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("bench", help="time solver variants on one instance or a grid series")
    _add_instance_args(p)
    _add_solver_args(p)
    p.add_argument("--variants", default=",".join(VARIANTS),
                   help="comma-separated variants (default: all four)")
    p.add_argument("--grids", default=None,
                   help="comma-separated grid sizes, e.g. 2,3,4,5,6 (uses --q)")
    p.add_argument("--plain-steps", default=None,
                   help="comma-separated step sizes tried for plain variants; the best run "
                        f"is reported (e.g. {','.join(f'{s:g}' for s in PLAIN_STEP_CANDIDATES)})")
    p.add_argument("--repeat", type=int, default=1, help="timing repeats; the minimum is kept")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("check", help="validate inputs and optionally audit a flows.csv")
    _add_instance_args(p)
    p.add_argument("--flows", type=Path, help="flows.csv written with --per-type-flows")
    p.add_argument("--theta", type=float, default=0.5)
    p.add_argument("--perturbation", choices=("entropy", "length-scaled"), default="entropy")
    p.add_argument("--tol", type=float, default=1e-4, help="complementarity tolerance")
    p.set_defaults(func=cmd_check)
    return parser


# ---------------------------------------------------------------------------
# Inputs

def _read(path: Path) -> str:
    try:
        return path.read_text()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror or exc}") from None


def load_instance(args) -> Instance:
    files = args.net is not None or args.trips is not None
    if files == (args.grid is not None):
        raise InputError("give either --net and --trips or --grid K")
    if not (args.scale > 0 and math.isfinite(args.scale)):
        raise InputError(f"--scale must be positive, got {args.scale}")
    if files:
        if args.net is None or args.trips is None:
            raise InputError("--net and --trips must be given together")
        try:
            net = parse_tntp_network(_read(args.net), name=args.net.stem)
        except ValueError as exc:
            raise InputError(f"{args.net}: {exc}") from None
        try:
            od = parse_tntp_trips(_read(args.trips))
        except ValueError as exc:
            raise InputError(f"{args.trips}: {exc}") from None
        for o, d, _ in od.entries:
            for nid in (o, d):
                if nid not in net.node_ids:
                    raise InputError(f"{args.trips}: OD pair {o} -> {d} uses unknown node {nid}")
        label = args.net.stem
    else:
        try:
            net = generate_grid(args.grid)
            od = gravity_demand(net, args.q)
        except ValueError as exc:
            raise InputError(str(exc)) from None
        label = f"grid{args.grid}"
    if args.scale != 1.0:
        od = scale_demand(od, args.scale)
    return Instance(net, od, label)


def _perturbation(args, net):
    return length_scaled_entropy(net) if args.perturbation == "length-scaled" else ENTROPY


def _config(args, **overrides) -> SolverConfig:
    fields = dict(variant=args.variant, gamma1=args.gamma1, gamma2=args.gamma2,
                  alpha=args.alpha, plain_step=args.plain_step, eps1=args.eps1,
                  eps2=args.eps2, clip_iters=args.clip_iters, max_iters=args.max_iters,
                  trace_every=args.trace_every, backend=args.backend)
    fields.update(overrides)
    try:
        return SolverConfig(**fields)
    except ValueError as exc:
        raise InputError(str(exc)) from None


def _check_structure(inst: Instance, types):
    diag = validate_network(inst.net, types)
    if not diag.ok:
        o, d = diag.unreachable_pairs[0]
        raise InputError(f"OD pair {o} -> {d} is unreachable "
                         f"({len(diag.unreachable_pairs)} unreachable pair(s))")
    return diag


# ---------------------------------------------------------------------------
# Commands

def _type_column(t) -> str:
    return f"x_{t.origin}_{t.destination}"


def write_flows(path: Path, net: Network, result, types, per_type: bool):
    times = bpr_time(net, result.X)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["from_node", "to_node", "aggregate_flow", "travel_time"]
        if per_type:
            header += [_type_column(t) for t in types]
        w.writerow(header)
        for e in range(net.num_links):
            row = [net.node_ids[net.tail[e]], net.node_ids[net.head[e]],
                   _fmt(result.X[e]), _fmt(times[e])]
            if per_type:
                row += [_fmt(result.x[k, e]) for k in range(len(types))]
            w.writerow(row)


def write_trace(path: Path, trace, timing: bool = True):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "R1", "R2", "Z", "G", "wall_ms"])
        for row in trace:
            w.writerow([row.iter, _fmt(row.R1), _fmt(row.R2), _fmt(row.Z), _fmt(row.G),
                        _fmt(row.wall_ms if timing else 0.0)])


def _json_float(v):
    v = float(v)
    return v if math.isfinite(v) else str(v)


def cmd_solve(args) -> int:
    inst = load_instance(args)
    types = to_traveler_types(inst.od)
    _check_structure(inst, types)
    config = _config(args)
    if not (args.theta > 0 and math.isfinite(args.theta)):
        raise InputError("--theta must be positive")
    try:
        args.out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create {args.out}: {exc.strerror or exc}") from None

    result = solve(inst.net, types, config, CostModel.uniform(len(types), args.theta),
                   _perturbation(args, inst.net))
    timing = not args.no_timing
    write_flows(args.out / "flows.csv", inst.net, result, types, args.per_type_flows)
    write_trace(args.out / "trace.csv", result.trace, timing)
    summary = {
        "converged": result.converged,
        "status": result.status,
        "message": result.message,
        "iterations": result.iterations,
        "R1": _json_float(result.R1),
        "R2": _json_float(result.R2),
        "Z": _json_float(result.Z),
        "G": _json_float(result.G),
        "wall_ms": result.wall_ms if timing else 0.0,
        "clamped_exponents": result.n_clamped,
        "skipped_newton_steps": result.n_skipped,
        "backend": result.backend,
        "instance": {
            "label": inst.label,
            "net": str(args.net) if args.net else None,
            "trips": str(args.trips) if args.trips else None,
            "grid": args.grid,
            "q": args.q if args.grid is not None else None,
            "scale": args.scale,
            "nodes": inst.net.num_nodes,
            "links": inst.net.num_links,
            "types": len(types),
            "total_demand": inst.od.total,
        },
        "config": {**config.to_dict(), "theta": args.theta,
                   "perturbation": args.perturbation, "seed": args.seed},
    }
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"{result.status}: {result.iterations} iterations, R1={result.R1:.3e}, "
          f"R2={result.R2:.3e}, Z={result.Z:.6g}")
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def cmd_grid(args) -> int:
    try:
        net = generate_grid(args.k)
        od = gravity_demand(net, args.q)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        net_path = args.out / f"grid{args.k}_net.tntp"
        trips_path = args.out / f"grid{args.k}_trips.tntp"
        net_path.write_text(write_tntp_network(net))
        trips_path.write_text(write_tntp_trips(od, zones=net.node_ids))
    except OSError as exc:
        raise InputError(f"cannot write to {args.out}: {exc.strerror or exc}") from None
    print(f"wrote {net_path} ({net.num_nodes} nodes, {net.num_links} links) and {trips_path}")
    return EXIT_OK


def _parse_list(text: str, cast, what: str):
    try:
        values = [cast(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InputError(f"cannot parse {what} list {text!r}") from None
    if not values:
        raise InputError(f"empty {what} list")
    return values


def fit_loglog_slope(sizes, times) -> float:
    """Least-squares slope of ``log(time)`` against ``log(size)``."""
    return float(np.polyfit(np.log(sizes), np.log(times), 1)[0])


def cmd_bench(args) -> int:
    variants = _parse_list(args.variants, str, "variant")
    for v in variants:
        if v not in VARIANTS:
            raise InputError(f"unknown variant {v!r}; choose from {', '.join(VARIANTS)}")
    steps = _parse_list(args.plain_steps, float, "step") if args.plain_steps else None
    if args.repeat < 1:
        raise InputError("--repeat must be at least 1")
    if args.grids:
        if args.net or args.trips or args.grid is not None:
            raise InputError("--grids cannot be combined with --net/--trips/--grid")
        instances = []
        for k in _parse_list(args.grids, int, "grid size"):
            args.grid = k
            instances.append(load_instance(args))
        args.grid = None
    else:
        instances = [load_instance(args)]
    theta = args.theta
    try:
        args.out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create {args.out}: {exc.strerror or exc}") from None

    rows = []
    for inst in instances:
        types = to_traveler_types(inst.od)
        _check_structure(inst, types)
        cm = CostModel.uniform(len(types), theta)
        pert = _perturbation(args, inst.net)
        for variant in variants:
            config = _config(args, variant=variant)
            best = None
            for _ in range(args.repeat):
                if steps is not None and not config.scaled:
                    res = solve_best_step(inst.net, types, config, steps, cm, pert)
                else:
                    res = solve(inst.net, types, config, cm, pert)
                if best is None or res.wall_ms < best.wall_ms:
                    best = res
            rows.append({
                "instance": inst.label,
                "variant": variant,
                "problem_size": inst.net.num_nodes * len(types),
                "nodes": inst.net.num_nodes,
                "types": len(types),
                "iterations": best.iterations,
                "wall_ms": best.wall_ms,
                "converged": best.converged,
                "status": best.status,
                "R1": best.R1,
                "R2": best.R2,
                "plain_step": "" if config.scaled else best.config.plain_step,
            })
            print(f"{inst.label:>12} {variant:>12}: {best.status} in {best.iterations} "
                  f"iterations, {best.wall_ms:.1f} ms")

    with (args.out / "bench.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(v) for k, v in row.items()})
    if len(instances) > 1:
        for variant in variants:
            pts = [(r["problem_size"], r["wall_ms"]) for r in rows if r["variant"] == variant]
            slope = fit_loglog_slope(*zip(*pts))
            print(f"{variant}: log-log slope of runtime vs |V||W| = {slope:.3f}")
    return EXIT_OK


def read_flows_csv(path: Path, net: Network, types):
    """Per-type flows from a flows.csv written with ``--per-type-flows``."""
    try:
        with path.open(newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror or exc}") from None
    cols = [_type_column(t) for t in types]
    if not rows or any(c not in rows[0] for c in cols):
        raise InputError(f"{path}: needs per-type flow columns (solve with --per-type-flows)")
    if len(rows) != net.num_links:
        raise InputError(f"{path}: {len(rows)} rows for {net.num_links} links")
    x = np.empty((len(types), net.num_links))
    for e, row in enumerate(rows):
        tail, head = net.node_ids[net.tail[e]], net.node_ids[net.head[e]]
        if (str(tail), str(head)) != (row["from_node"], row["to_node"]):
            raise InputError(f"{path}: row {e + 2} is link {row['from_node']}->{row['to_node']}, "
                             f"expected {tail}->{head}")
        try:
            x[:, e] = [float(row[c]) for c in cols]
        except ValueError:
            raise InputError(f"{path}: bad number on row {e + 2}") from None
    return x


def cmd_check(args) -> int:
    inst = load_instance(args)
    types = to_traveler_types(inst.od)
    diag = validate_network(inst.net, types)
    print(f"network {inst.label}: {inst.net.num_nodes} nodes, {inst.net.num_links} links, "
          f"{len(types)} OD pairs")
    for line in diag.lines():
        print(line)
    if not diag.ok:
        print("FAIL: unreachable OD pairs")
        return EXIT_INPUT
    if args.flows is None:
        print("PASS")
        return EXIT_OK
    x = read_flows_csv(args.flows, inst.net, types)
    q = np.array([t.volume for t in types])
    costs = CostModel.uniform(len(types), args.theta).costs(bpr_time(inst.net, np.maximum(q @ x, 0)))
    dest = [inst.net.index_of(t.destination) for t in types]
    pert = _perturbation(args, inst.net)
    eta = recover_potentials(x, costs, inst.net, dest, pert)
    report = kkt_check(x, eta, costs, inst.net, pert, tol=args.tol)
    print(f"max complementarity violation: {report.max_violation:.3e}")
    print(f"min flow: {report.min_flow:.3e}")
    if report.max_violation > args.tol or report.min_flow < -args.tol:
        print(f"FAIL: violation above {args.tol:g}")
        return EXIT_INPUT
    print("PASS")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InputError, NetworkValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
