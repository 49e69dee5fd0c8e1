import math
from pathlib import Path

import numpy as np
import pytest

from purc_ta import (Network, TravelerType, generate_grid, gravity_demand, parse_tntp_network,
                     parse_tntp_trips, to_traveler_types)

FIXTURES = Path(__file__).parent / "fixtures"
SIOUX_NET = FIXTURES / "SiouxFalls_net.tntp"
SIOUX_TRIPS = FIXTURES / "SiouxFalls_trips.tntp"

_ACCEPTANCE = pytest.StashKey[list]()


def two_link_network(cost_gap: float, theta: float = 0.5, beta: float = 0.0) -> Network:
    """Two parallel links 1 -> 2 whose costs ``theta * t0`` are 1 and ``1 + cost_gap``."""
    t0 = np.array([1.0, 1.0 + cost_gap]) / theta
    return Network(node_ids=(1, 2), tail=np.array([0, 0]), head=np.array([1, 1]),
                   free_flow_time=t0, capacity=np.ones(2), bpr_coeff=np.full(2, beta),
                   bpr_power=np.full(2, 4.0), length=np.ones(2), name="two-link")


def triangle_network(beta: float = 0.15) -> Network:
    """1 -> 2 -> 3 plus the direct link 1 -> 3."""
    return Network(node_ids=(1, 2, 3), tail=np.array([0, 1, 0]), head=np.array([1, 2, 2]),
                   free_flow_time=np.array([1.0, 1.0, 1.5]), capacity=np.ones(3),
                   bpr_coeff=np.full(3, beta), bpr_power=np.full(3, 4.0), length=np.ones(3),
                   name="triangle")


def single_link_network(t0=1.0, capacity=5000.0) -> Network:
    return Network(node_ids=(1, 2), tail=np.array([0]), head=np.array([1]),
                   free_flow_time=np.array([t0]), capacity=np.array([capacity]),
                   bpr_coeff=np.array([0.15]), bpr_power=np.array([4.0]), length=np.ones(1))


def grid_instance(k, q, capacity=5000.0):
    net = generate_grid(k, capacity=capacity)
    return net, to_traveler_types(gravity_demand(net, q))


def uncongested(net: Network) -> Network:
    return Network(node_ids=net.node_ids, tail=net.tail, head=net.head,
                   free_flow_time=net.free_flow_time, capacity=net.capacity,
                   bpr_coeff=np.zeros(net.num_links), bpr_power=net.bpr_power,
                   length=net.length, name=net.name + "-free")


@pytest.fixture(scope="session")
def sioux_net():
    return parse_tntp_network(SIOUX_NET.read_text(), "SiouxFalls")


@pytest.fixture(scope="session")
def sioux_od():
    return parse_tntp_trips(SIOUX_TRIPS.read_text())


@pytest.fixture(scope="session")
def sioux_types(sioux_od):
    return to_traveler_types(sioux_od)


@pytest.fixture
def unit_type():
    return [TravelerType(0, 1, 2, 1.0)]


@pytest.fixture
def record_criterion(request):
    """Record one acceptance line; printed in the terminal summary."""
    store = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number: int, name: str, ok: bool, detail: str = ""):
        store.append((number, name, bool(ok), detail))
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = config.stash.get(_ACCEPTANCE, [])
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, ok, detail in sorted(rows, key=lambda r: r[0]):
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {number}: {name}"
                                    + (f" ({detail})" if detail else ""))


def rel(a, b):
    return abs(a - b) / abs(b) if b else abs(a - b)


def isclose_all(a, b, tol):
    return bool(np.all(np.abs(np.asarray(a) - np.asarray(b)) <= tol)) and math.isfinite(tol)
