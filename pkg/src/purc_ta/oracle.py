"""Reference solutions for tiny networks.

The primal problem is solved over path flows: each type spreads its unit
demand over the simple paths from its origin to its destination, and the
objective is minimised by projected gradient on those simplices. This gives
an independent check of the dual solver.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .demand import TravelerType
from .network import Network, shortest_potentials
from .purc import (ENTROPY, CostModel, PerturbationFunction, aggregate_flow, bpr_time,
                   primal_objective)

MAX_ORACLE_NODES = 64


class OracleError(RuntimeError):
    pass


@dataclass(frozen=True)
class PathSet:
    """Simple paths per type as tuples of link indices, plus path-link incidence."""

    paths: tuple
    incidence: tuple  # one (n_paths, n_links) 0/1 array per type

    @classmethod
    def build(cls, net: Network, types: Sequence[TravelerType], max_nodes: int | None = None,
              max_paths: int = 100_000) -> "PathSet":
        paths, mats = [], []
        for t in types:
            p = enumerate_paths(net, t.origin, t.destination, max_nodes, max_paths)
            if not p:
                raise OracleError(f"no path from {t.origin} to {t.destination}")
            m = np.zeros((len(p), net.num_links))
            for i, links in enumerate(p):
                m[i, list(links)] = 1.0
            paths.append(tuple(p))
            mats.append(m)
        return cls(tuple(paths), tuple(mats))

    def __len__(self) -> int:
        return len(self.paths)


def enumerate_paths(net: Network, origin, destination, max_nodes: int | None = None,
                    max_paths: int = 100_000) -> list[tuple]:
    """All simple paths from ``origin`` to ``destination`` (node ids).

    Paths are link-index tuples in lexicographic order. Only paths visiting at
    most ``max_nodes`` nodes are kept (default: all).
    """
    if net.num_nodes > MAX_ORACLE_NODES:
        raise OracleError(f"path enumeration is limited to {MAX_ORACLE_NODES} nodes; "
                          f"network has {net.num_nodes}")
    o, d = net.index_of(origin), net.index_of(destination)
    limit = net.num_nodes if max_nodes is None else int(max_nodes)
    outgoing = [sorted(links) for links in net.incidence.outgoing]
    found: list[tuple] = []
    on_path = np.zeros(net.num_nodes, dtype=bool)
    on_path[o] = True
    links: list[int] = []

    def visit(v):
        if v == d:
            found.append(tuple(links))
            if len(found) > max_paths:
                raise OracleError(f"more than {max_paths} paths from {origin} to "
                                  f"{destination}; use a smaller instance")
            return
        if len(links) + 2 > limit:
            return
        for e in outgoing[v]:
            u = int(net.head[e])
            if not on_path[u]:
                on_path[u] = True
                links.append(e)
                visit(u)
                links.pop()
                on_path[u] = False

    visit(o)
    found.sort()
    return found


# ---------------------------------------------------------------------------
# Primal solve

def project_simplex(v: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row of ``v`` onto the unit simplex over the
    entries where ``mask`` is true; masked-out entries come back as zero."""
    big = np.where(mask, v, -np.inf)
    u = -np.sort(-big, axis=1)
    finite = np.isfinite(u)
    css = np.cumsum(np.where(finite, u, 0.0), axis=1)
    k = np.arange(1, v.shape[1] + 1)
    cond = finite & (u - (css - 1.0) / k > 0)
    rho = cond.shape[1] - 1 - np.argmax(cond[:, ::-1], axis=1)
    tau = (css[np.arange(v.shape[0]), rho] - 1.0) / (rho + 1)
    return np.where(mask, np.maximum(v - tau[:, None], 0.0), 0.0)


@dataclass
class PrimalSolution:
    x: np.ndarray          # per-type unit link flows (W, E)
    X: np.ndarray          # aggregate link flows
    path_flows: list       # per-type arrays on the simplex
    Z: float
    iterations: int
    projected_gradient: float


def primal_solve(net: Network, types: Sequence[TravelerType],
                 perturbation: PerturbationFunction = ENTROPY, congested: bool = True,
                 cost_model: CostModel | None = None, paths: PathSet | None = None,
                 tol: float = 1e-10, max_iters: int = 10_000_000,
                 seed: int | None = None) -> PrimalSolution:
    """Minimise the assignment objective over path flows.

    With ``congested=False`` link times are frozen at free flow. The start is
    uniform over paths, or a random point of each simplex when ``seed`` is
    given. The step comes from a local Lipschitz estimate that is checked on
    gradient differences, which avoids cancellation in objective values near
    the optimum. Stops when ``max |f - P(f - g)| <= tol`` with ``g`` the per-unit
    path gradient.
    """
    types = list(types)
    cm = cost_model if cost_model is not None else CostModel.uniform(len(types))
    if not types:
        zeros = np.zeros((0, net.num_links))
        return PrimalSolution(zeros, np.zeros(net.num_links), [], 0.0, 0, 0.0)
    ps = paths if paths is not None else PathSet.build(net, types)
    q = np.array([t.volume for t in types], dtype=float)
    theta = np.asarray(cm.theta, dtype=float)
    weight = cm.reference_theta * q / theta  # metric on each type's simplex

    n_types = len(types)
    width = max(m.shape[0] for m in ps.incidence)
    inc = np.zeros((n_types, width, net.num_links))
    mask = np.zeros((n_types, width), dtype=bool)
    for w, m in enumerate(ps.incidence):
        inc[w, :m.shape[0]] = m
        mask[w, :m.shape[0]] = True

    if seed is None:
        f = mask / mask.sum(axis=1, keepdims=True)
    else:
        rng = np.random.default_rng(seed)
        f = np.where(mask, rng.exponential(size=mask.shape), 0.0)
        f /= f.sum(axis=1, keepdims=True)

    def link_flows(f):
        return np.einsum("wp,wpe->we", f, inc)

    def times(x):
        return bpr_time(net, q @ x) if congested else net.free_flow_time

    def grad(f):
        x = link_flows(f)
        unit = theta[:, None] * times(x)[None, :] + perturbation.deriv(x)
        return np.where(mask, np.einsum("wpe,we->wp", inc, unit), 0.0)

    def pg_norm(f, g):
        return float(np.abs(f - project_simplex(f - g, mask)).max())

    g = grad(f)
    L = 1.0
    it = 0
    res = pg_norm(f, g)
    while res > tol:
        if it >= max_iters:
            raise OracleError(f"primal oracle did not converge in {max_iters} iterations "
                              f"(projected gradient {res:.3e})")
        while True:
            f_new = project_simplex(f - g / L, mask)
            g_new = grad(f_new)
            d = f_new - f
            curv = float(weight @ ((g_new - g) * d).sum(axis=1))
            sq = float(weight @ (d * d).sum(axis=1))
            if curv <= L * sq or sq == 0.0:
                break
            L *= 2.0
        f, g = f_new, g_new
        L = max(L * 0.7, 1e-12)
        it += 1
        res = pg_norm(f, g)

    x = link_flows(f)
    if not congested:
        z = _uncongested_objective(x, net, q, theta, cm, perturbation)
    else:
        z = primal_objective(x, net, types, cm, perturbation)
    return PrimalSolution(x, aggregate_flow(x, q), [f[w, mask[w]] for w in range(n_types)],
                          z, it, res)


def _uncongested_objective(x, net, q, theta, cm, perturbation) -> float:
    ref = cm.reference_theta
    linear = ref * float(net.free_flow_time @ aggregate_flow(x, q))
    return linear + float((q * ref / theta) @ perturbation.value(x).sum(axis=1))


# ---------------------------------------------------------------------------
# Audits

@dataclass(frozen=True)
class KKTReport:
    """Complementarity audit of ``x >= 0``, ``s >= 0``, ``x s = 0`` with
    ``s = c + F'(x) + eta_head - eta_tail``."""

    max_violation: float       # max |min(x, s)| over links and types
    min_flow: float
    min_slack: float
    max_product: float
    n_negative_flow: int
    n_negative_slack: int
    n_complementarity: int
    tol: float

    @property
    def ok(self) -> bool:
        return self.n_negative_flow == 0 and self.n_negative_slack == 0 and self.n_complementarity == 0


def kkt_check(x: np.ndarray, eta: np.ndarray, costs: np.ndarray, net: Network,
              perturbation: PerturbationFunction = ENTROPY, tol: float = 1e-8) -> KKTReport:
    """Evaluate the complementarity conditions link by link for every type."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    eta = np.atleast_2d(np.asarray(eta, dtype=float))
    costs = np.broadcast_to(np.asarray(costs, dtype=float), x.shape)
    s = costs + perturbation.deriv(np.maximum(x, 0.0)) + eta[:, net.head] - eta[:, net.tail]
    prod = x * s
    if x.size == 0:
        return KKTReport(0.0, 0.0, 0.0, 0.0, 0, 0, 0, tol)
    return KKTReport(
        max_violation=float(np.abs(np.minimum(x, s)).max()),
        min_flow=float(x.min()),
        min_slack=float(s.min()),
        max_product=float(np.abs(prod).max()),
        n_negative_flow=int(np.count_nonzero(x < -tol)),
        n_negative_slack=int(np.count_nonzero(s < -tol)),
        n_complementarity=int(np.count_nonzero(np.abs(prod) > tol)),
        tol=tol,
    )


def recover_potentials(x: np.ndarray, costs: np.ndarray, net: Network, dest: Sequence[int],
                       perturbation: PerturbationFunction = ENTROPY) -> np.ndarray:
    """Potentials implied by flows: shortest-path costs to each destination with
    link weights ``c + F'(x)``. At an optimum these equal the dual potentials."""
    x = np.atleast_2d(x)
    costs = np.broadcast_to(costs, x.shape)
    eta = np.empty((x.shape[0], net.num_nodes))
    for w in range(x.shape[0]):
        eta[w] = shortest_potentials(net, costs[w] + perturbation.deriv(np.maximum(x[w], 0.0)),
                                     int(dest[w]))
    return eta


def positive_flow_acyclic(x: np.ndarray, net: Network, threshold: float = 1e-8) -> list[int]:
    """Indices of types whose links with flow above ``threshold`` contain a cycle."""
    x = np.atleast_2d(x)
    bad = []
    for w in range(x.shape[0]):
        used = np.flatnonzero(x[w] > threshold)
        indeg = np.zeros(net.num_nodes, dtype=np.int64)
        out = [[] for _ in range(net.num_nodes)]
        for e in used:
            out[net.tail[e]].append(net.head[e])
            indeg[net.head[e]] += 1
        ready = list(np.flatnonzero(indeg == 0))
        seen = 0
        while ready:
            v = ready.pop()
            seen += 1
            for u in out[v]:
                indeg[u] -= 1
                if indeg[u] == 0:
                    ready.append(u)
        if seen < net.num_nodes:
            bad.append(w)
    return bad

