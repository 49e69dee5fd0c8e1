"""Compare the compiled kernel with the numpy fallback.

Runs the default solver on Sioux Falls (three demand levels) and on grids,
once per backend, and reports wall time, iterations and the largest flow
difference between the two runs.

    python benchmarks/bench_backends.py [--threads N] [--repeat R]
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from purc_ta import generate_grid, gravity_demand, parse_tntp_network, parse_tntp_trips
from purc_ta import scale_demand, to_traveler_types
from purc_ta.kernels import COMPILED_AVAILABLE
from purc_ta.solver import SolverConfig, solve

FIXTURES = Path(__file__).resolve().parent.parent / "tests" / "fixtures"


def instances():
    net = parse_tntp_network((FIXTURES / "SiouxFalls_net.tntp").read_text(), "SiouxFalls")
    od = parse_tntp_trips((FIXTURES / "SiouxFalls_trips.tntp").read_text())
    for s in (1.0, 1.5, 2.0):
        yield f"SiouxFalls {s:g}q", net, to_traveler_types(scale_demand(od, s))
    for k in (4, 6):
        g = generate_grid(k)
        yield f"grid{k}", g, to_traveler_types(gravity_demand(g, 100.0))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if not COMPILED_AVAILABLE:
        raise SystemExit("compiled kernel not built; reinstall with Cython and a C compiler")

    print(f"{'instance':<16}{'iters':>12}{'python ms':>12}{'compiled ms':>13}{'speedup':>9}"
          f"{'max |dx|':>11}")
    for label, net, types in instances():
        runs = {}
        for backend in ("python", "compiled"):
            cfg = SolverConfig(backend=backend, threads=args.threads)
            runs[backend] = min((solve(net, types, cfg) for _ in range(args.repeat)),
                                key=lambda r: r.wall_ms)
        py, c = runs["python"], runs["compiled"]
        dx = float(np.abs(py.x - c.x).max())
        iters = f"{c.iterations}" if c.iterations == py.iterations else f"{c.iterations}/{py.iterations}"
        print(f"{label:<16}{iters:>12}{py.wall_ms:>12.1f}{c.wall_ms:>13.1f}"
              f"{py.wall_ms / c.wall_ms:>9.2f}{dx:>11.2e}")


if __name__ == "__main__":
    main()
