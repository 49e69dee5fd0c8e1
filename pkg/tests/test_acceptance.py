"""Acceptance criteria, one test per criterion.

Each test records a pass/fail line that is printed in the terminal summary.
"""

import csv
import math
import time

import numpy as np
import pytest

from purc_ta import TravelerType, generate_grid, scale_demand, to_traveler_types
from purc_ta.cli import main
from purc_ta.oracle import kkt_check, positive_flow_acyclic, primal_solve
from purc_ta.purc import CostModel, dual_objective, load_flows, primal_objective
from purc_ta.solver import PLAIN_STEP_CANDIDATES, SolverConfig, solve, solve_best_step

from conftest import (SIOUX_NET, SIOUX_TRIPS, grid_instance, triangle_network,
                      two_link_network, uncongested)

# the oracle comparison needs the dual solver well past its default tolerance
TIGHT = SolverConfig(eps1=1e-10, eps2=1e-10, threads=1)
UNIT = [TravelerType(0, 1, 2, 1.0)]


def _fixtures():
    """Small instances shared by the oracle, complementarity and acyclicity checks."""
    tri = triangle_network()
    g2c_net, g2c_types = grid_instance(2, 2.0, capacity=1.0)
    g3c_net, g3c_types = grid_instance(3, 2.0, capacity=2.0)
    return {
        "parallel": (two_link_network(math.log(1.5)), UNIT),
        "triangle": (tri, [TravelerType(0, 1, 3, 2.0), TravelerType(1, 2, 3, 1.0),
                           TravelerType(2, 1, 2, 1.0)]),
        "grid1": (uncongested(generate_grid(1)), grid_instance(1, 1.0)[1]),
        "grid2": (uncongested(generate_grid(2)), grid_instance(2, 1.0)[1]),
        "grid2-bpr": (g2c_net, g2c_types),
        "grid3-bpr": (g3c_net, g3c_types),
    }


@pytest.fixture(scope="module")
def solved_fixtures():
    out = {}
    for name, (net, types) in _fixtures().items():
        start = time.perf_counter()
        res = solve(net, types, TIGHT)
        ref = primal_solve(net, types)
        out[name] = (net, types, res, ref, time.perf_counter() - start)
    return out


@pytest.fixture(scope="module")
def sioux_runs(sioux_net, sioux_od):
    runs = {}
    for scale in (1.0, 1.5, 2.0):
        types = to_traveler_types(scale_demand(sioux_od, scale))
        start = time.perf_counter()
        res = solve(sioux_net, types, SolverConfig(threads=1, trace_every=1))
        runs[scale] = (types, res, time.perf_counter() - start)
    return runs


def test_criterion_1_two_link_closed_form(record_criterion):
    start = time.perf_counter()
    interior = solve(two_link_network(math.log(1.5)), UNIT, TIGHT)
    corner = solve(two_link_network(math.log(3.0)), UNIT, TIGHT)
    elapsed = time.perf_counter() - start
    err = float(np.abs(interior.x[0] - [0.8, 0.2]).max())
    exact = corner.x[0].tolist() == [1.0, 0.0]
    ok = interior.converged and err <= 1e-6 and exact and elapsed < 1.0
    record_criterion(1, "two-link closed form", ok,
                     f"interior err {err:.2e}, corner {corner.x[0].tolist()}, {elapsed:.3f}s")
    assert ok


def test_criterion_2_oracle_equivalence(solved_fixtures, record_criterion):
    worst_flow, worst_z, total, bad = 0.0, 0.0, 0.0, []
    for name, (net, types, res, ref, elapsed) in solved_fixtures.items():
        assert net.num_nodes <= 30
        dx = float(np.abs(res.x - ref.x).max())
        z = primal_objective(res.x, net, types)
        dz = abs(z - ref.Z) / abs(ref.Z)
        worst_flow, worst_z, total = max(worst_flow, dx), max(worst_z, dz), total + elapsed
        if not (res.converged and dx <= 1e-4 and dz <= 1e-6):
            bad.append(name)
    ok = len(solved_fixtures) >= 5 and not bad and total < 60.0
    record_criterion(2, "oracle equivalence", ok,
                     f"{len(solved_fixtures)} fixtures, max flow diff {worst_flow:.2e}, "
                     f"max rel Z diff {worst_z:.2e}, {total:.1f}s, failing {bad}")
    assert ok


def test_criterion_3_gradient_finite_differences(record_criterion):
    rng = np.random.default_rng(20261015)
    instances = [(two_link_network(0.3), UNIT)] + [
        (net, types) for net, types in (_fixtures()[k] for k in ("triangle", "grid1", "grid2"))]
    h, worst = 1e-6, 0.0
    for probe in range(100):
        net, types = instances[probe % len(instances)]
        if len(types) > 6:
            types = [types[i] for i in rng.choice(len(types), 6, replace=False)]
        q = np.array([t.volume for t in types])
        tstar = net.free_flow_time * rng.uniform(1.0, 2.0, net.num_links)
        eta = rng.uniform(0.0, 4.0, (len(types), net.num_nodes))
        x = load_flows(eta, CostModel.uniform(len(types)).costs(tstar), net)
        grad = np.array([q[w] * (net.incidence.apply(x[w]) - types[w].demand_vector(net))
                         for w in range(len(types))])
        fd = np.empty_like(grad)
        for idx in np.ndindex(*eta.shape):
            up, dn = eta.copy(), eta.copy()
            up[idx] += h
            dn[idx] -= h
            fd[idx] = (dual_objective(up, tstar, net, types)
                       - dual_objective(dn, tstar, net, types)) / (2 * h)
        worst = max(worst, float(np.linalg.norm(fd - grad) / np.linalg.norm(grad)))
    ok = worst <= 1e-6
    record_criterion(3, "gradient vs finite differences", ok, f"max rel err {worst:.2e}")
    assert ok


def test_criterion_4_sioux_falls(sioux_net, sioux_runs, record_criterion):
    details, ok = [], True
    for scale, (_, res, elapsed) in sioux_runs.items():
        good = res.converged and res.R1 <= 1e-5 and res.R2 <= 1e-5 and elapsed < 60.0
        ok &= good
        details.append(f"{scale}q {res.iterations} it {elapsed:.1f}s")
    types = sioux_runs[1.0][0]
    cap = 20000
    star = sioux_runs[1.0][1]
    qn = solve(sioux_net, types, SolverConfig(variant="qn-agd", threads=1, max_iters=cap))
    agd_star = solve_best_step(sioux_net, types,
                               SolverConfig(variant="agd-star", threads=1, max_iters=cap),
                               steps=PLAIN_STEP_CANDIDATES)

    def cost(r):  # a run that did not converge counts as slower than any that did
        return r.iterations if r.converged else math.inf

    ordered = cost(star) < cost(qn) < cost(agd_star)
    ok &= ordered
    details.append(f"iterations qN-AGD* {cost(star)} < qN-AGD {cost(qn)} < "
                   f"AGD* {cost(agd_star)}")
    record_criterion(4, "Sioux Falls convergence", ok, ", ".join(details))
    assert ok


def test_criterion_5_objective_ratio_trajectory(sioux_runs, record_criterion):
    res = sioux_runs[1.0][1]
    z = np.array([row.Z for row in res.trace])
    ratio = z / z[-1]
    inside = np.abs(ratio - 1.0) <= 1e-4
    first = int(np.argmax(inside)) if inside.any() else -1
    exits = np.flatnonzero(~inside[first:]) + first if first >= 0 else np.array([], int)
    ok = res.converged and first >= 0 and exits.size == 0
    detail = (f"enters band at trace row {first}, leaves {exits.size} times, "
              f"last exit at row {int(exits[-1]) if exits.size else None} of {len(z)}, "
              f"max ratio {ratio.max():.3e}")
    record_criterion(5, "objective ratio stays in band", ok, detail)
    assert ok


def test_criterion_6_complementarity(solved_fixtures, sioux_net, sioux_runs, record_criterion):
    worst, names = 0.0, []
    cases = [(n, net, r) for n, (net, _, r, _, _) in solved_fixtures.items()]
    cases += [(f"sioux-{s}q", sioux_net, r) for s, (_, r, _) in sioux_runs.items()]
    for name, net, res in cases:
        if not res.converged:
            continue
        names.append(name)
        worst = max(worst, kkt_check(res.x, res.eta, res.costs, net).max_violation)
    ok = worst <= 1e-4 and len(names) == len(cases)
    record_criterion(6, "complementarity at convergence", ok,
                     f"max violation {worst:.2e} over {len(names)}/{len(cases)} converged")
    assert ok


def test_criterion_7_acyclicity(solved_fixtures, sioux_net, sioux_runs, record_criterion):
    cyclic = []
    cases = [(n, net, r) for n, (net, _, r, _, _) in solved_fixtures.items()]
    cases += [(f"sioux-{s}q", sioux_net, r) for s, (_, r, _) in sioux_runs.items()]
    for name, net, res in cases:
        if positive_flow_acyclic(res.x, net, threshold=1e-8):
            cyclic.append(name)
    ok = not cyclic
    record_criterion(7, "positive-flow subgraphs acyclic", ok,
                     f"{len(cases)} fixtures, cyclic: {cyclic}")
    assert ok


def test_criterion_8_scaling_slope(tmp_path, monkeypatch, capsys, record_criterion):
    monkeypatch.setenv("PURC_THREADS", "1")
    start = time.perf_counter()
    code = main(["bench", "--grids", "2,3,4,5,6", "--q", "100", "--variants", "qn-agd-star",
                 "--repeat", "3", "--out", str(tmp_path)])
    elapsed = time.perf_counter() - start
    with open(tmp_path / "bench.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    size = np.array([float(r["problem_size"]) for r in rows])
    wall = np.array([float(r["wall_ms"]) for r in rows])
    slope = float(np.polyfit(np.log(size), np.log(wall), 1)[0])
    converged = all(r["converged"] == "True" for r in rows)
    ok = code == 0 and converged and 0.7 <= slope <= 1.4 and elapsed < 600
    record_criterion(8, "grid scaling slope", ok,
                     f"slope {slope:.3f}, all converged {converged}, {elapsed:.0f}s")
    assert ok


def test_criterion_9_determinism(tmp_path, monkeypatch, record_criterion):
    monkeypatch.setenv("PURC_THREADS", "1")
    traces = []
    for name in ("a", "b"):
        code = main(["solve", "--net", str(SIOUX_NET), "--trips", str(SIOUX_TRIPS),
                     "--no-timing", "--out", str(tmp_path / name)])
        assert code == 0
        traces.append((tmp_path / name / "trace.csv").read_bytes())
    ok = traces[0] == traces[1]
    record_criterion(9, "single-threaded determinism", ok,
                     f"trace.csv {len(traces[0])} bytes, identical {ok}")
    assert ok
