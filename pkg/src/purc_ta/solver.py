"""Dual accelerated gradient ascent for perturbed utility traffic assignment.

Four variants share one loop:

* ``qn-agd-star``: Hessian-diagonal scaled gradient, momentum ``m/(m+alpha)``
* ``qn-agd``: scaled gradient, momentum ``(r_m - 1)/r_{m+1}``
* ``agd-star`` / ``agd``: raw gradient times ``plain_step``, same two momenta

Each iteration loads flows in closed form from the current potentials and
link times, takes a momentum step on the potentials and one damped Newton
step on the link-time fixed point ``t* = t(X)``.
"""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import kernels
from ._fallback import incidence_matrices
from .demand import TravelerType
from .network import Network, NetworkValidationError, shortest_tree
from .purc import (ENTROPY, CostModel, EntropyPerturbation, PerturbationFunction,
                   bpr_time, bpr_time_deriv, load_flows_counted)

VARIANTS = ("qn-agd-star", "qn-agd", "agd-star", "agd")
PLAIN_STEP_CANDIDATES = (1e-4, 1e-5, 1e-6)

#: default number of clipped iterations for the scaled variants
DEFAULT_CLIP_ITERS = 100


@dataclass(frozen=True)
class SolverConfig:
    """Solver settings.

    Parameters
    ----------
    variant : str
        One of ``VARIANTS``.
    gamma1, gamma2 : float
        Step sizes for the potentials (scaled variants) and the link times.
    alpha : float
        Momentum parameter of the starred variants, ``> 1``.
    plain_step : float
        Step size on the raw gradient for ``agd`` and ``agd-star``.
    eps1, eps2 : float
        Tolerances on the flow-conservation and fixed-point residuals.
    clip_iters : int or None
        Number of initial iterations with loaded flows capped at one. ``None``
        picks 100 for the scaled variants and ``max_iters`` for the plain ones,
        whose small fixed steps otherwise let uncapped flows blow up.
    max_iters : int
        Iteration limit.
    trace_every : int
        Record every n-th iteration (the final one is always recorded).
    threads : int or None
        Worker threads for the compiled kernel; ``None`` reads ``PURC_THREADS``
        and 0 means automatic.
    backend : str
        ``auto``, ``compiled`` or ``python``.
    divergence_window, divergence_factor : int, float
        Abort when R1 exceeds ``divergence_factor`` times its value
        ``divergence_window`` iterations earlier (and is above ``eps1``).
    """

    variant: str = "qn-agd-star"
    gamma1: float = 0.5
    gamma2: float = 1.0
    alpha: float = 10.0
    plain_step: float = 1e-4
    eps1: float = 1e-5
    eps2: float = 1e-5
    clip_iters: int | None = None
    max_iters: int = 100_000
    trace_every: int = 1
    threads: int | None = None
    backend: str = "auto"
    divergence_window: int = 500
    divergence_factor: float = 10.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("gamma1", "gamma2", "plain_step", "eps1", "eps2", "divergence_factor"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be positive and finite, got {value!r}")
        if not (self.alpha > 1 and math.isfinite(self.alpha)):
            raise ValueError(f"alpha must be greater than 1, got {self.alpha!r}")
        if self.clip_iters is not None and self.clip_iters < 0:
            raise ValueError("clip_iters must be non-negative")
        if self.max_iters < 0:
            raise ValueError("max_iters must be non-negative")
        if self.trace_every < 1:
            raise ValueError("trace_every must be at least 1")
        if self.threads is not None and self.threads < 0:
            raise ValueError("threads must be non-negative")
        if self.backend not in ("auto", "compiled", "python"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.divergence_window < 1:
            raise ValueError("divergence_window must be at least 1")

    @property
    def scaled(self) -> bool:
        return self.variant.startswith("qn-")

    @property
    def starred(self) -> bool:
        return self.variant.endswith("-star")

    @property
    def effective_clip_iters(self) -> int:
        if self.clip_iters is not None:
            return int(self.clip_iters)
        return DEFAULT_CLIP_ITERS if self.scaled else int(self.max_iters)

    @property
    def effective_threads(self) -> int:
        return kernels.thread_count() if self.threads is None else int(self.threads)

    def step(self) -> float:
        return self.gamma1 if self.scaled else self.plain_step

    def to_dict(self) -> dict:
        """Every field plus the resolved clip window and thread count."""
        out = dataclasses.asdict(self)
        out["clip_iters_effective"] = self.effective_clip_iters
        out["threads_effective"] = self.effective_threads
        return out


@dataclass
class SolverState:
    """Mutable iterate owned by the solve loop.

    ``eta`` and ``eta_tilde`` are ``(W, V)``; ``tstar`` is ``(E,)``; ``x`` holds
    the flows from the latest loading, ``(W, E)``.
    """

    m: int
    eta: np.ndarray
    eta_tilde: np.ndarray
    tstar: np.ndarray
    x: np.ndarray
    theta: np.ndarray
    r: float = 1.0

    @property
    def costs(self) -> np.ndarray:
        return self.theta[:, None] * self.tstar[None, :]


class TraceRow(NamedTuple):
    iter: int
    R1: float
    R2: float
    Z: float
    G: float
    wall_ms: float


@dataclass
class AssignmentResult:
    """Outcome of :func:`solve`.

    ``status`` is ``converged``, ``max_iters`` or ``diverged``. ``x`` are the
    per-type unit flows from the final loading (the ones the residuals refer
    to), ``X`` the aggregate flows and ``tstar``/``eta`` the final iterate.
    """

    status: str
    iterations: int
    x: np.ndarray
    X: np.ndarray
    tstar: np.ndarray
    costs: np.ndarray
    eta: np.ndarray
    R1: float
    R2: float
    Z: float
    G: float
    trace: list = field(default_factory=list)
    n_clamped: int = 0
    n_skipped: int = 0
    backend: str = "python"
    threads: int = 0
    wall_ms: float = 0.0
    message: str = ""
    config: SolverConfig | None = None

    @property
    def converged(self) -> bool:
        return self.status == "converged"


# ---------------------------------------------------------------------------
# Initialisation

_UNREACHABLE_MARGIN = 1.0


def _type_arrays(net: Network, types: Sequence[TravelerType]):
    orig = np.array([net.index_of(t.origin) for t in types], dtype=np.int64)
    dest = np.array([net.index_of(t.destination) for t in types], dtype=np.int64)
    q = np.array([t.volume for t in types], dtype=float)
    return orig, dest, q


def aon_flows(net: Network, orig, dest, q, link_costs) -> np.ndarray:
    """All-or-nothing aggregate flows on shortest paths with deterministic ties."""
    X = np.zeros(net.num_links)
    trees = {}
    for w in range(q.size):
        d = int(dest[w])
        if d not in trees:
            trees[d] = shortest_tree(net, link_costs, d)
        dist, nxt = trees[d]
        v = int(orig[w])
        if not np.isfinite(dist[v]):
            raise NetworkValidationError(
                f"OD pair {net.node_ids[v]} -> {net.node_ids[d]} is unreachable")
        while v != d:
            e = nxt[v]
            X[e] += q[w]
            v = int(net.head[e])
    return X


def initialize(net: Network, types: Sequence[TravelerType],
               cost_model: CostModel | None = None) -> SolverState:
    """AON start: free-flow shortest paths give ``t*(0)``, and ``eta(0)`` holds
    the shortest-path costs to each type's destination under ``c(t*(0))``.

    Nodes that cannot reach a destination get a potential above every finite
    one, so they never attract flow.
    """
    n_types = len(types)
    cm = cost_model if cost_model is not None else CostModel.uniform(n_types)
    if cm.theta.size != n_types:
        raise ValueError(f"cost model has {cm.theta.size} coefficients for {n_types} types")
    orig, dest, q = _type_arrays(net, types)
    X = aon_flows(net, orig, dest, q, net.free_flow_time)
    tstar = bpr_time(net, X)
    eta = np.zeros((n_types, net.num_nodes))
    cache = {}
    for w in range(n_types):
        key = (int(dest[w]), float(cm.theta[w]))
        if key not in cache:
            c = cm.theta[w] * tstar
            pot = shortest_tree(net, c, key[0])[0]
            finite = np.isfinite(pot)
            pot[~finite] = pot[finite].max() + c.sum() + _UNREACHABLE_MARGIN
            cache[key] = pot
        eta[w] = cache[key]
    return SolverState(m=0, eta=eta, eta_tilde=eta.copy(), tstar=tstar,
                       x=np.zeros((n_types, net.num_links)), theta=np.array(cm.theta))


# ---------------------------------------------------------------------------
# Single-step operations (the solve loop uses the fused kernel instead)

def load(state: SolverState, net: Network, perturbation: PerturbationFunction = ENTROPY,
         clip: bool = False) -> int:
    """Reload ``state.x`` from the current potentials and times; returns clamps."""
    state.x, n = load_flows_counted(state.eta, state.costs, net, perturbation, clip)
    return n


def _unit_gradient(state: SolverState, net: Network, types: Sequence[TravelerType]):
    orig, dest, _ = _type_arrays(net, types)
    g = net.incidence.apply(state.x)
    rows = np.arange(len(types))
    g[rows, orig] += 1.0
    g[rows, dest] -= 1.0
    return g


def gradient(state: SolverState, net: Network, types: Sequence[TravelerType]) -> np.ndarray:
    """Dual gradient ``q^w (A x^w - b^w)`` for all types and nodes, ``(W, V)``."""
    _, _, q = _type_arrays(net, types)
    return q[:, None] * _unit_gradient(state, net, types)


def scaled_gradient(state: SolverState, net: Network, types: Sequence[TravelerType],
                    perturbation: PerturbationFunction = ENTROPY) -> np.ndarray:
    """Per-unit gradient divided by the incident sum of ``1/F''(x)``.

    For the entropy this is ``sum (x + 1)`` over links in or out of the node;
    the demand factor cancels against the Hessian bound.
    """
    g = _unit_gradient(state, net, types)
    den = net.incidence.apply_abs(perturbation.curvature_inv(state.x))
    return np.divide(g, den, out=np.zeros_like(g), where=den > 0)


def gradient_eta(state, net, types, w: int, k: int) -> float:
    """Single entry of :func:`gradient` for type ``w`` at node index ``k``."""
    return float(gradient(state, net, types)[w, k])


def scaled_gradient_eta(state, net, types, w: int, k: int,
                        perturbation: PerturbationFunction = ENTROPY) -> float:
    return float(scaled_gradient(state, net, types, perturbation)[w, k])


def momentum_coefficient(variant: str, m: int, alpha: float = 10.0,
                         r: float = 1.0) -> tuple[float, float]:
    """Return ``(coefficient, r_next)`` for iteration ``m``.

    Starred variants use ``m / (m + alpha)`` and leave ``r`` unchanged; the
    others advance ``r_{m+1} = (1 + sqrt(1 + 4 r_m^2)) / 2`` and use
    ``(r_m - 1) / r_{m+1}``.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if variant.endswith("-star"):
        return m / (m + alpha), r
    r_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * r * r))
    return (r - 1.0) / r_next, r_next


def update_potentials(state: SolverState, direction: np.ndarray, step: float,
                      coefficient: float, dest: np.ndarray) -> None:
    """Momentum step ``eta~' = eta + step*direction``, ``eta = eta~' + c (eta~' - eta~)``.

    Destination entries are left untouched, so they stay at zero.
    """
    if not np.all(np.isfinite(direction)):
        raise FloatingPointError("non-finite potential gradient")
    d = step * direction
    d[np.arange(d.shape[0]), dest] = 0.0
    new = state.eta + d
    state.eta = new + coefficient * (new - state.eta_tilde)
    state.eta_tilde = new


def update_times(state: SolverState, net: Network, types: Sequence[TravelerType],
                 gamma2: float = 1.0, perturbation: PerturbationFunction = ENTROPY) -> int:
    """One damped Newton step on ``t(X) - t* = 0`` per link; returns skipped links.

    The derivative of the residual is ``-t'(X) sum_w q^w theta^w / F''(x^w) - 1``
    where the sum runs over positive flows only.
    """
    _, _, q = _type_arrays(net, types)
    x = state.x
    X = q @ x if q.size else np.zeros(net.num_links)
    S = (q * state.theta) @ np.where(x > 0, perturbation.curvature_inv(x), 0.0) \
        if q.size else np.zeros(net.num_links)
    U = bpr_time(net, X) - state.tstar
    dU = -bpr_time_deriv(net, X) * S - 1.0
    ok = np.abs(dU) >= 1e-12
    new = np.where(ok, state.tstar - gamma2 * U / np.where(ok, dU, 1.0), state.tstar)
    state.tstar = np.maximum(new, net.free_flow_time)
    return int(np.count_nonzero(~ok))


def residuals(state: SolverState, net: Network, types: Sequence[TravelerType]
              ) -> tuple[float, float]:
    """``R1`` (demand-weighted mean conservation error per node) and ``R2``
    (mean absolute fixed-point error of the link times)."""
    _, _, q = _type_arrays(net, types)
    X = q @ state.x if q.size else np.zeros(net.num_links)
    r2 = float(np.abs(bpr_time(net, X) - state.tstar).mean()) if net.num_links else 0.0
    if not q.size:
        return 0.0, r2
    g = _unit_gradient(state, net, types)
    r1 = float(q @ np.abs(g).sum(axis=1)) / q.sum() / net.num_nodes
    return r1, r2


# ---------------------------------------------------------------------------
# Solve loop

def _select_backend(config: SolverConfig, perturbation: PerturbationFunction):
    entropy = type(perturbation) is EntropyPerturbation
    if config.backend == "compiled" and not entropy:
        raise ValueError("the compiled kernel only supports the entropy perturbation")
    backend = config.backend if entropy else "python"
    return kernels.get_iterate(backend)


def solve(net: Network, types: Sequence[TravelerType], config: SolverConfig | None = None,
          cost_model: CostModel | None = None,
          perturbation: PerturbationFunction = ENTROPY) -> AssignmentResult:
    """Run the dual assignment until both residuals meet their tolerances.

    Reaching ``max_iters`` or tripping the divergence guard returns a result
    with ``status`` set accordingly rather than raising.
    """
    config = config or SolverConfig()
    types = list(types)
    cm = cost_model if cost_model is not None else CostModel.uniform(len(types))
    state = initialize(net, types, cm)
    backend, iterate = _select_backend(config, perturbation)
    threads = config.effective_threads

    n_types, n_links = len(types), net.num_links
    if n_types == 0:
        t = bpr_time(net, np.zeros(n_links))
        r2 = float(np.abs(t - state.tstar).mean()) if n_links else 0.0
        status = "converged" if r2 <= config.eps2 else "max_iters"
        return AssignmentResult(status=status, iterations=0, x=state.x, X=np.zeros(n_links),
                                tstar=state.tstar, costs=state.costs, eta=state.eta,
                                R1=0.0, R2=r2, Z=0.0, G=0.0,
                                trace=[TraceRow(0, 0.0, r2, 0.0, 0.0, 0.0)],
                                backend=backend, threads=threads, config=config)

    orig, dest, q = _type_arrays(net, types)
    tail = np.ascontiguousarray(net.tail, dtype=np.int64)
    head = np.ascontiguousarray(net.head, dtype=np.int64)
    t0 = np.ascontiguousarray(net.free_flow_time, dtype=float)
    cap = np.ascontiguousarray(net.capacity, dtype=float)
    beta = np.ascontiguousarray(net.bpr_coeff, dtype=float)
    power = np.ascontiguousarray(net.bpr_power, dtype=float)
    theta = np.ascontiguousarray(cm.theta, dtype=float)
    theta_ref = cm.reference_theta
    zweight = theta_ref / theta
    incidence = incidence_matrices(tail, head, net.num_nodes) if backend == "python" else None

    eta = np.ascontiguousarray(state.eta)
    eta_tilde = np.ascontiguousarray(state.eta_tilde)
    tstar = np.ascontiguousarray(state.tstar)
    x = np.zeros((n_types, n_links))

    clip_iters = config.effective_clip_iters
    step = config.step()
    r = 1.0
    trace: list[TraceRow] = []
    history: list[float] = []
    n_clamped = n_skipped = 0
    status, message = "max_iters", ""
    r1 = r2 = z = g = math.nan
    iterations = 0
    start = time.perf_counter()

    for m in range(config.max_iters):
        coef, r = momentum_coefficient(config.variant, m, config.alpha, r)
        nc, ns, r1, r2, z, g = iterate(
            eta, eta_tilde, tstar, x, tail, head, t0, cap, beta, power,
            q, theta, zweight, orig, dest, m < clip_iters, config.scaled,
            step, coef, config.gamma2, theta_ref,
            threads=threads, perturbation=perturbation, incidence=incidence)
        iterations = m + 1
        n_clamped += nc
        n_skipped += ns
        done = r1 <= config.eps1 and r2 <= config.eps2
        finite = math.isfinite(r1) and math.isfinite(r2) and math.isfinite(z)
        if not finite:
            status, message = "diverged", f"non-finite residual or objective at iteration {m}"
        elif done:
            status = "converged"
        else:
            history.append(r1)
            lag = m - config.divergence_window
            if lag >= 0 and r1 > config.eps1 and r1 > config.divergence_factor * history[lag]:
                status = "diverged"
                message = (f"R1 grew from {history[lag]:.3e} to {r1:.3e} over "
                           f"{config.divergence_window} iterations")
        stop = status != "max_iters"
        if stop or m % config.trace_every == 0 or m == config.max_iters - 1:
            trace.append(TraceRow(m, r1, r2, z, g, (time.perf_counter() - start) * 1e3))
        if stop:
            break
        if not np.all(np.isfinite(eta)):
            status, message = "diverged", f"non-finite potentials at iteration {m}"
            break

    if status == "max_iters":
        message = f"no convergence within {config.max_iters} iterations"
    X = q @ x
    state.m, state.eta, state.eta_tilde, state.tstar, state.x, state.r = \
        iterations, eta, eta_tilde, tstar, x, r
    return AssignmentResult(
        status=status, iterations=iterations, x=x, X=X, tstar=tstar, costs=state.costs,
        eta=eta, R1=r1, R2=r2, Z=z, G=g, trace=trace, n_clamped=n_clamped,
        n_skipped=n_skipped, backend=backend, threads=threads,
        wall_ms=(time.perf_counter() - start) * 1e3, message=message, config=config)


def solve_best_step(net: Network, types: Sequence[TravelerType], config: SolverConfig,
                    steps: Sequence[float] = PLAIN_STEP_CANDIDATES,
                    cost_model: CostModel | None = None,
                    perturbation: PerturbationFunction = ENTROPY) -> AssignmentResult:
    """Run a plain variant for each step size and keep the best run.

    Converged runs beat non-converged ones; ties break on fewer iterations,
    then on the smaller final R1.
    """
    best = None
    for s in steps:
        res = solve(net, types, dataclasses.replace(config, plain_step=s), cost_model, perturbation)
        key = (not res.converged, res.iterations if res.converged else 0,
               res.R1 if math.isfinite(res.R1) else math.inf)
        if best is None or key < best[0]:
            best = (key, res)
    return best[1]
