import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from purc_ta.demand import TravelerType, gravity_demand, to_traveler_types
from purc_ta.network import generate_grid
from purc_ta.purc import (ENTROPY, MAX_EXPONENT, CostModel, ScaledPerturbation, bpr_integral,
                          bpr_time, bpr_time_deriv, dual_objective, length_scaled_entropy,
                          link_cost, load_flows, load_flows_counted, primal_objective)

from conftest import single_link_network, triangle_network


class TestEntropy:
    def test_zero(self):
        assert ENTROPY.value(0.0) == 0.0 and ENTROPY.deriv(0.0) == 0.0

    def test_closed_forms(self):
        assert ENTROPY.value(1.0) == pytest.approx(2 * math.log(2) - 1)
        assert ENTROPY.inv_deriv(math.log(3)) == pytest.approx(2.0)
        assert ENTROPY.inv_deriv_slope(math.log(3)) == pytest.approx(3.0)
        assert ENTROPY.curvature_inv(2.0) == 3.0

    @pytest.mark.parametrize("y", [0.0, -1e-300, -1.0, -50.0])
    def test_inverse_is_zero_for_non_positive(self, y):
        assert ENTROPY.inv_deriv(y) == 0.0 and ENTROPY.inv_deriv_slope(y) == 0.0

    def test_round_trip_and_monotone_on_log_grid(self):
        x = np.concatenate([[0.0], np.logspace(-12, 6, 400)])
        back = ENTROPY.inv_deriv(ENTROPY.deriv(x))
        assert np.all(np.abs(back - x) <= 1e-10 * np.maximum(1.0, x))
        d = ENTROPY.deriv(x)
        assert np.all(np.diff(d) > 0) and np.all(d[1:] > 0)
        assert np.all(np.diff(ENTROPY.value(x)) > 0)

    @given(st.floats(0.0, 1e3), st.floats(0.0, 1e3), st.floats(0.0, 1.0))
    def test_convex(self, a, b, lam):
        mid = lam * a + (1 - lam) * b
        lhs = float(ENTROPY.value(mid))
        rhs = lam * float(ENTROPY.value(a)) + (1 - lam) * float(ENTROPY.value(b))
        assert lhs <= rhs + 1e-9 * max(1.0, abs(rhs))

    @given(st.floats(1e-6, 20.0))
    def test_slope_is_derivative_of_inverse(self, y):
        h = 1e-6 * max(1.0, y)
        fd = (ENTROPY.inv_deriv(y + h) - ENTROPY.inv_deriv(y - h)) / (2 * h) if y > h else None
        if fd is not None:
            assert float(ENTROPY.inv_deriv_slope(y)) == pytest.approx(float(fd), rel=1e-5)

    def test_clamp_counts(self):
        y, n = ENTROPY.clamp(np.array([1.0, 31.0, 100.0]))
        assert n == 2 and y.max() == MAX_EXPONENT


class TestScaled:
    def test_scaling(self):
        p = ScaledPerturbation(ENTROPY, np.array([2.0, 0.5]))
        x = np.array([1.0, 3.0])
        assert np.allclose(p.value(x), [2 * ENTROPY.value(1.0), 0.5 * ENTROPY.value(3.0)])
        assert np.allclose(p.inv_deriv(p.deriv(x)), x)
        assert np.allclose(p.curvature_inv(x), (1 + x) / np.array([2.0, 0.5]))

    def test_clamp_in_scaled_units(self):
        p = ScaledPerturbation(ENTROPY, np.array([2.0]))
        y, n = p.clamp(np.array([70.0]))
        assert n == 1 and y[0] == 60.0

    def test_rejects_non_positive_scale(self):
        with pytest.raises(ValueError):
            ScaledPerturbation(ENTROPY, np.array([1.0, 0.0]))

    def test_length_scaled(self):
        net = generate_grid(1, length=2.5)
        assert np.all(length_scaled_entropy(net).scale == 2.5)


class TestBPR:
    def test_examples(self):
        net = single_link_network()
        assert bpr_time(net, [0.0])[0] == 1.0 and bpr_time_deriv(net, [0.0])[0] == 0.0
        assert bpr_time(net, [5000.0])[0] == pytest.approx(1.15)
        assert bpr_time(net, [10000.0])[0] == pytest.approx(3.4)

    def test_negative_flow_rejected(self):
        net = single_link_network()
        for f in (bpr_time, bpr_time_deriv, bpr_integral):
            with pytest.raises(ValueError):
                f(net, [-1.0])

    @pytest.mark.parametrize("mult", [0.1, 1.0, 3.0])
    @pytest.mark.parametrize("theta", [0.5, 1.3])
    def test_integral_matches_quadrature(self, mult, theta):
        net = single_link_network(t0=1.7, capacity=800.0)
        X = mult * 800.0
        num, _ = quad(lambda m: theta * bpr_time(net, [m])[0], 0.0, X, epsabs=0, epsrel=1e-13)
        assert theta * bpr_integral(net, [X])[0] == pytest.approx(num, rel=1e-9)

    @given(st.floats(1.0, 2e4))
    def test_derivative_matches_difference(self, x):
        net = single_link_network()
        h = 1e-3 * x
        fd = (bpr_time(net, [x + h])[0] - bpr_time(net, [x - h])[0]) / (2 * h)
        assert bpr_time_deriv(net, [x])[0] == pytest.approx(fd, rel=1e-5)


class TestCost:
    def test_examples(self):
        c, dc = link_cost(2.0, 0.5)
        assert c == 1.0 and dc == 0.5
        assert link_cost(1.0, 1.0)[0] == 1.0

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            link_cost(1.0, 0.0)
        with pytest.raises(ValueError):
            link_cost(0.0, 0.5)
        with pytest.raises(ValueError):
            CostModel(np.array([0.5, -1.0]))

    def test_model(self):
        cm = CostModel.uniform(3)
        assert np.all(cm.theta == 0.5) and cm.reference_theta == 0.5
        assert cm.costs(np.array([2.0, 4.0])).shape == (3, 2)
        assert CostModel(np.array([1.0, 0.5])).reference_theta == pytest.approx(2 / 3)


class TestLoading:
    def setup_method(self):
        self.net = single_link_network()

    def load(self, gap, clip=False):
        eta = np.array([[gap + 1.0, 0.0]])
        return load_flows(eta, np.array([[1.0]]), self.net, clip=clip)[0, 0]

    def test_examples(self):
        assert self.load(math.log(2)) == pytest.approx(1.0, rel=1e-15)
        assert self.load(0.0) == 0.0
        assert self.load(math.log(3), clip=True) == 1.0
        assert self.load(math.log(3)) == pytest.approx(2.0)

    def test_clamp_warns(self):
        with pytest.warns(RuntimeWarning, match="clamped 1"):
            x = self.load(40.0)
        assert x == pytest.approx(math.expm1(MAX_EXPONENT))

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=30)
    def test_zero_flow_sparsity(self, seed):
        rng = np.random.default_rng(seed)
        net = triangle_network()
        eta = rng.normal(scale=2.0, size=(4, 3))
        costs = rng.uniform(0.1, 2.0, size=(4, 3))
        x, _ = load_flows_counted(eta, costs, net)
        arg = eta[:, net.tail] - eta[:, net.head] - costs
        assert np.array_equal(x == 0.0, arg <= 0.0)


def one_link_instance():
    return single_link_network(), [TravelerType(0, 1, 2, 1.0)]


class TestObjectives:
    def test_zero_flows(self):
        net, types = one_link_instance()
        assert primal_objective(np.zeros((1, 1)), net, types) == 0.0

    def test_one_link_value(self):
        net, types = one_link_instance()
        z = primal_objective(np.ones((1, 1)), net, types)
        expected = 0.5 * (1 + 0.15 / (5 * 5000.0 ** 4)) + (2 * math.log(2) - 1)
        assert z == pytest.approx(expected, rel=1e-14)
        assert z == pytest.approx(0.886294, abs=1e-6)

    def test_one_link_quadrature(self):
        net, types = one_link_instance()
        num, _ = quad(lambda m: 0.5 * bpr_time(net, [m])[0], 0.0, 1.0, epsrel=1e-13)
        z = primal_objective(np.ones((1, 1)), net, types)
        assert z - float(ENTROPY.value(1.0)) == pytest.approx(num, rel=1e-12)

    def test_theta_linearity(self):
        net, types = one_link_instance()
        x = np.ones((1, 1))
        f = float(ENTROPY.value(1.0))
        z1 = primal_objective(x, net, types, CostModel.uniform(1, 0.5)) - f
        z2 = primal_objective(x, net, types, CostModel.uniform(1, 1.0)) - f
        assert z2 == pytest.approx(2 * z1, rel=1e-14)

    def test_dual_at_zero_potentials(self):
        net, types = one_link_instance()
        assert dual_objective(np.zeros((1, 2)), np.array([1.0]), net, types) == 0.0

    def test_dual_modes_and_gap_identity(self):
        net = triangle_network()
        types = [TravelerType(0, 1, 3, 2.0), TravelerType(1, 2, 3, 1.0)]
        rng = np.random.default_rng(3)
        eta = rng.uniform(0, 2, size=(2, 3))
        eta[:, 2] = 0.0
        t = np.array([1.0, 1.2, 1.6])
        full = dual_objective(eta, t, net, types, mode="full")
        x = load_flows(eta, CostModel.uniform(2).costs(t), net)
        z = primal_objective(x, net, types)
        q = np.array([2.0, 1.0])
        gap = q @ (((eta[:, net.tail] - eta[:, net.head]) * x).sum(axis=1)
                   + eta[[0, 1], [2, 2]] - eta[[0, 1], [0, 1]])
        assert z - full == pytest.approx(gap, rel=1e-12)
        with pytest.raises(ValueError):
            dual_objective(eta, t, net, types, mode="nope")

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_finite_difference_gradient(self, seed):
        rng = np.random.default_rng(seed)
        net = generate_grid(2)
        types = to_traveler_types(gravity_demand(net, 10.0))[::5]
        t = rng.uniform(1.0, 2.0, net.num_links)
        eta = rng.uniform(0.0, 3.0, (len(types), net.num_nodes))
        x = load_flows(eta, CostModel.uniform(len(types)).costs(t), net)
        q = np.array([ty.volume for ty in types])
        w = int(rng.integers(len(types)))
        v = int(rng.integers(net.num_nodes))
        b = types[w].demand_vector(net)
        grad = q[w] * (net.incidence.apply(x[w]) - b)[v]
        h = 1e-6
        up, dn = eta.copy(), eta.copy()
        up[w, v] += h
        dn[w, v] -= h
        fd = (dual_objective(up, t, net, types) - dual_objective(dn, t, net, types)) / (2 * h)
        assert abs(fd - grad) <= max(1e-6, 1e-4 * abs(grad))

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_inner_minimiser(self, seed):
        # x*(eta) minimises c.x + F(x) - (eta_i - eta_j).x over x >= 0
        rng = np.random.default_rng(seed)
        net = triangle_network()
        eta = rng.uniform(0, 3, (1, 3))
        c = rng.uniform(0.1, 1.0, (1, 3))
        x = load_flows(eta, c, net)

        def inner(y):
            return float((c * y).sum() + ENTROPY.value(y).sum()
                         - ((eta[:, net.tail] - eta[:, net.head]) * y).sum())

        best = inner(x)
        for _ in range(20):
            y = np.maximum(x + rng.normal(scale=0.3, size=x.shape), 0.0)
            assert inner(y) >= best - 1e-12
