"""Perturbation functions, link costs and closed-form network loading.

Array conventions used throughout the package: per-type per-node arrays are
shaped ``(n_types, n_nodes)`` and per-type per-link arrays ``(n_types, n_links)``.
"""

from __future__ import annotations

import warnings
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .demand import TravelerType
from .network import Network

#: Largest exponent argument evaluated during entropy loading.
MAX_EXPONENT = 30.0


class PerturbationFunction(ABC):
    """Link-separable convex perturbation ``F`` with ``F(0) = F'(0) = 0``.

    All methods are elementwise on numpy arrays. ``inv_deriv`` is the inverse
    of ``F'`` extended by zero to ``y <= 0``.
    """

    #: arguments to ``inv_deriv`` above this are clamped (``inf`` = never)
    max_argument: float = np.inf

    def clamp(self, y):
        """Clamp loading arguments at ``max_argument``; returns ``(y, n_clamped)``."""
        if not np.isfinite(self.max_argument):
            return y, 0
        over = y > self.max_argument
        n = int(np.count_nonzero(over))
        return (np.minimum(y, self.max_argument), n) if n else (y, 0)

    @abstractmethod
    def value(self, x): ...

    @abstractmethod
    def deriv(self, x): ...

    @abstractmethod
    def inv_deriv(self, y): ...

    @abstractmethod
    def inv_deriv_slope(self, y):
        """Derivative of ``inv_deriv``; zero for ``y <= 0``."""

    @abstractmethod
    def curvature_inv(self, x):
        """``1 / F''(x)``, the slope of ``inv_deriv`` at ``y = F'(x)`` from above."""


class EntropyPerturbation(PerturbationFunction):
    """``F(x) = (1 + x) ln(1 + x) - x``."""

    max_argument = MAX_EXPONENT

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return (1.0 + x) * np.log1p(x) - x

    def deriv(self, x):
        return np.log1p(np.asarray(x, dtype=float))

    def inv_deriv(self, y):
        y = np.asarray(y, dtype=float)
        return np.where(y > 0, np.expm1(np.maximum(y, 0.0)), 0.0)

    def inv_deriv_slope(self, y):
        y = np.asarray(y, dtype=float)
        return np.where(y > 0, np.exp(np.maximum(y, 0.0)), 0.0)

    def curvature_inv(self, x):
        return 1.0 + np.asarray(x, dtype=float)

    def __repr__(self):
        return "EntropyPerturbation()"


class ScaledPerturbation(PerturbationFunction):
    """``F_e(x) = s_e * base(x)`` with positive per-link (or per-type-link) scales.

    With ``s_e`` set to link lengths this gives the length-scaled perturbation
    that is invariant to link splitting.
    """

    def __init__(self, base: PerturbationFunction, scale):
        scale = np.asarray(scale, dtype=float)
        if np.any(~(scale > 0)):
            raise ValueError("perturbation scales must be positive")
        self.base = base
        self.scale = scale
        self.max_argument = base.max_argument

    def value(self, x):
        return self.scale * self.base.value(x)

    def deriv(self, x):
        return self.scale * self.base.deriv(x)

    def inv_deriv(self, y):
        return self.base.inv_deriv(np.asarray(y, dtype=float) / self.scale)

    def inv_deriv_slope(self, y):
        return self.base.inv_deriv_slope(np.asarray(y, dtype=float) / self.scale) / self.scale

    def curvature_inv(self, x):
        return self.base.curvature_inv(x) / self.scale

    def clamp(self, y):
        arg, n = self.base.clamp(np.asarray(y, dtype=float) / self.scale)
        return (arg * self.scale, n) if n else (y, 0)

    def __repr__(self):
        return f"ScaledPerturbation({self.base!r}, scale=<{self.scale.shape}>)"


ENTROPY = EntropyPerturbation()


def length_scaled_entropy(net: Network) -> ScaledPerturbation:
    return ScaledPerturbation(ENTROPY, net.length)


# ---------------------------------------------------------------------------
# Travel times and costs

def _check_flow(x):
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("link flows must be non-negative")
    return x


def bpr_time(net: Network, x) -> np.ndarray:
    """BPR travel time ``t0 * (1 + beta * (x / capacity) ** power)``."""
    x = _check_flow(x)
    return net.free_flow_time * (1.0 + net.bpr_coeff * (x / net.capacity) ** net.bpr_power)


def bpr_time_deriv(net: Network, x) -> np.ndarray:
    x = _check_flow(x)
    p = net.bpr_power
    return net.free_flow_time * net.bpr_coeff * p * x ** (p - 1.0) / net.capacity ** p


def bpr_integral(net: Network, x) -> np.ndarray:
    """Closed form of the integral of the BPR time from 0 to ``x``."""
    x = _check_flow(x)
    p = net.bpr_power
    return net.free_flow_time * (x + net.bpr_coeff * x ** (p + 1.0)
                                 / ((p + 1.0) * net.capacity ** p))


@dataclass(frozen=True)
class CostModel:
    """Type-specific linear cost of travel time, ``c^w = theta^w * t``."""

    theta: np.ndarray

    def __post_init__(self):
        theta = np.atleast_1d(np.asarray(self.theta, dtype=float))
        if theta.ndim != 1 or np.any(~(theta > 0)) or np.any(~np.isfinite(theta)):
            raise ValueError("cost coefficients theta must be positive and finite")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @classmethod
    def uniform(cls, n_types: int, theta: float = 0.5) -> "CostModel":
        return cls(np.full(n_types, float(theta)))

    @property
    def reference_theta(self) -> float:
        """Demand-independent scale making the objective exact for uniform theta.

        For uniform theta this is theta itself; otherwise the harmonic mean,
        which keeps the objective a valid potential for the equilibrium.
        """
        if self.theta.size == 0:
            return 1.0
        return float(1.0 / np.mean(1.0 / self.theta))

    def costs(self, t: np.ndarray) -> np.ndarray:
        """Per-type per-link costs for link times ``t``."""
        return self.theta[:, None] * np.asarray(t, dtype=float)[None, :]


def link_cost(t, theta: float = 0.5):
    """Return ``(cost, dcost/dt)`` for travel time ``t``."""
    if not theta > 0:
        raise ValueError("theta must be positive")
    t = np.asarray(t, dtype=float)
    if np.any(~(t > 0)):
        raise ValueError("travel time must be positive")
    return theta * t, np.full_like(t, theta)


# ---------------------------------------------------------------------------
# Network loading

def load_flows_counted(eta: np.ndarray, costs: np.ndarray, net: Network,
                       perturbation: PerturbationFunction = ENTROPY,
                       clip: bool = False) -> tuple[np.ndarray, int]:
    """Closed-form loading; returns ``(x, n_clamped)``.

    ``x[w, e] = inv_deriv(eta[w, tail] - eta[w, head] - costs[w, e])``, with the
    argument clamped at ``perturbation.max_argument`` and, when ``clip`` is
    set, the result capped at one.
    """
    y = eta[:, net.tail] - eta[:, net.head] - costs
    y, n_clamped = perturbation.clamp(y)
    x = perturbation.inv_deriv(y)
    if clip:
        x = np.minimum(x, 1.0)
    return x, n_clamped


def load_flows(eta: np.ndarray, costs: np.ndarray, net: Network,
               perturbation: PerturbationFunction = ENTROPY, clip: bool = False) -> np.ndarray:
    x, n_clamped = load_flows_counted(eta, costs, net, perturbation, clip)
    if n_clamped:
        warnings.warn(f"loading clamped {n_clamped} exponent argument(s) at "
                      f"{perturbation.max_argument}", RuntimeWarning, stacklevel=2)
    return x


# ---------------------------------------------------------------------------
# Objectives

def _volumes(types: Sequence[TravelerType]) -> np.ndarray:
    return np.array([t.volume for t in types], dtype=float)


def _default_costs(types, cost_model):
    return cost_model if cost_model is not None else CostModel.uniform(len(types))


def aggregate_flow(x: np.ndarray, q: np.ndarray) -> np.ndarray:
    """``X_e = sum_w q^w x^w_e``, accumulated over types in index order."""
    total = np.zeros(x.shape[1])
    for w in range(x.shape[0]):
        total += q[w] * x[w]
    return total


def primal_objective(x: np.ndarray, net: Network, types: Sequence[TravelerType],
                     cost_model: CostModel | None = None,
                     perturbation: PerturbationFunction = ENTROPY) -> float:
    """Assignment objective ``Z`` for per-type unit flows ``x``.

    ``Z = theta_ref * sum_e int_0^{X_e} t_e + sum_w q^w (theta_ref/theta^w) sum_e F(x^w_e)``;
    with uniform theta this is the congestion integral of ``c = theta t`` plus
    the demand-weighted perturbation.
    """
    x = _check_flow(x)
    cm = _default_costs(types, cost_model)
    q = _volumes(types)
    if x.size == 0:
        return 0.0
    ref = cm.reference_theta
    congestion = ref * bpr_integral(net, aggregate_flow(x, q)).sum()
    weight = q * ref / cm.theta
    return float(congestion + weight @ perturbation.value(x).sum(axis=1))


def _demand_term(eta, net, types):
    """``sum_v eta_v b_v`` per type."""
    o = np.array([net.index_of(t.origin) for t in types], dtype=np.int64)
    d = np.array([net.index_of(t.destination) for t in types], dtype=np.int64)
    rows = np.arange(len(types))
    return eta[rows, d] - eta[rows, o]


def dual_objective(eta: np.ndarray, tstar: np.ndarray, net: Network,
                   types: Sequence[TravelerType], cost_model: CostModel | None = None,
                   perturbation: PerturbationFunction = ENTROPY,
                   mode: str = "lagrangian") -> float:
    """Dual objective at potentials ``eta`` and link-time guess ``tstar``.

    ``mode="lagrangian"`` evaluates the Lagrangian with costs frozen at
    ``c(tstar)``; its gradient in ``eta`` is ``q^w (A x^w - b^w)``.
    ``mode="full"`` replaces the linear cost term with the congestion integral,
    giving a value directly comparable to ``primal_objective``.
    """
    tstar = np.asarray(tstar, dtype=float)
    if np.any(~(tstar > 0)):
        raise ValueError("link times must be positive")
    if not types:
        return 0.0
    cm = _default_costs(types, cost_model)
    q = _volumes(types)
    costs = cm.costs(tstar)
    x, _ = load_flows_counted(eta, costs, net, perturbation)
    potential_gap = ((eta[:, net.tail] - eta[:, net.head]) * x).sum(axis=1)
    multiplier = potential_gap + _demand_term(eta, net, types)
    if mode == "lagrangian":
        per_type = (costs * x).sum(axis=1) + perturbation.value(x).sum(axis=1) - multiplier
        return float(q @ per_type)
    if mode == "full":
        weight = q * cm.reference_theta / cm.theta
        return primal_objective(x, net, types, cm, perturbation) - float(weight @ multiplier)
    raise ValueError(f"unknown dual objective mode {mode!r}")
