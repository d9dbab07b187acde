import math
import unittest

import numpy as np
import sympy
from hypothesis import given, settings, strategies as st

from cumulants import (
    INFINITY,
    CumulantVector,
    carleman_constant,
    chi_total,
    chi_total_curve,
    cumulants_to_moments,
    empirical_factorial_cumulants,
    gw_factorial_moments,
    gw_generating_function,
    moments_to_cumulants,
    partitions,
    steady_state_cumulants,
)
from errors import NoConvergenceWithinBudget, TableHorizonTooShort, ValidationError
from model import validate
from moment_hierarchy import solve_hierarchy, uniform_grid
from test_model import make_params


def symbolic_factorial_cumulants(order):
    """chi_1..chi_order in terms of m_1..m_order from log E[(1+s)^N]"""
    s = sympy.Symbol('s')
    m = sympy.symbols(f'm1:{order + 1}')
    generating = 1 + sum(m[k - 1] * s ** k / sympy.factorial(k) for k in range(1, order + 1))
    series = sympy.series(sympy.log(generating), s, 0, order + 1).removeO()
    return m, [sympy.expand(series.coeff(s, l) * sympy.factorial(l)) for l in range(1, order + 1)]


class TestPartitions(unittest.TestCase):
    def test_partition_counts(self):
        """Number of integer partitions of 1..8"""
        self.assertEqual([len(partitions(l)) for l in range(1, 9)], [1, 2, 3, 5, 7, 11, 15, 22])
        for l in range(1, 9):
            for js in partitions(l):
                self.assertEqual(sum(k * j for k, j in enumerate(js, start=1)), l)


class TestTransforms(unittest.TestCase):
    def test_low_orders(self):
        chi = moments_to_cumulants([0.7, 1.3, 2.0]).values
        self.assertAlmostEqual(chi[0], 0.7)
        self.assertAlmostEqual(chi[1], 1.3 - 0.49)
        self.assertAlmostEqual(chi[2], 2.0 - 3 * 1.3 * 0.7 + 2 * 0.7 ** 3)

    def test_against_log_generating_function(self):
        """Transforms agree with the series of log E[(1+s)^N] up to order 6"""
        symbols, formulas = symbolic_factorial_cumulants(6)
        values = [0.4, 0.9, 2.1, 5.5, 17.0, 61.0]
        substitution = dict(zip(symbols, values))
        chi = moments_to_cumulants(values).values
        for computed, formula in zip(chi, formulas):
            self.assertAlmostEqual(computed, float(formula.subs(substitution)), delta=1e-9 * max(1.0, abs(computed)))

    def test_poisson_has_only_first_cumulant(self):
        lam = 1.7
        chi = moments_to_cumulants([lam ** k for k in range(1, 9)]).values
        self.assertAlmostEqual(chi[0], lam)
        for value in chi[1:]:
            self.assertAlmostEqual(value, 0.0, delta=1e-9)

    @settings(max_examples=100)
    @given(st.lists(st.floats(0.05, 1.0), min_size=1, max_size=8))
    def test_round_trip(self, scaled):
        """m_k = k! u_k survives moments -> cumulants -> moments"""
        m = [math.factorial(k) * u for k, u in enumerate(scaled, start=1)]
        back = cumulants_to_moments(moments_to_cumulants(m)).values
        for k, (a, b) in enumerate(zip(m, back), start=1):
            self.assertAlmostEqual(a / math.factorial(k), b / math.factorial(k), delta=1e-10)

    def test_empty_vectors(self):
        with self.assertRaises(ValidationError):
            moments_to_cumulants([])
        with self.assertRaises(ValidationError):
            cumulants_to_moments(())

    def test_carleman_constant(self):
        self.assertAlmostEqual(carleman_constant(CumulantVector(values=(2.0, 8.0))), 2.0)


class TestTotalPopulation(unittest.TestCase):
    def setUp(self):
        self.model = validate(make_params(beta=(0.3,), gamma=0.2))
        self.table = solve_hierarchy(self.model, 16, 2, uniform_grid(4.0, 0.05))

    def test_first_cumulant_closed_form(self):
        """chi_1(N(t)) = gamma(1 - e^{-Delta t})/Delta"""
        for t in (0.0, 0.5, 1.3, 4.0):
            exact = 0.2 * -math.expm1(-0.7 * t) / 0.7
            self.assertAlmostEqual(chi_total(self.model, 1, t, self.table), exact, delta=1e-6)

    def test_curve_rules_agree(self):
        simpson = chi_total_curve(self.model, 2, self.table)
        trapezoid = chi_total_curve(self.model, 2, self.table, rule='trapezoid')
        self.assertEqual(simpson[0], 0.0)
        np.testing.assert_allclose(simpson, trapezoid, atol=1e-4)
        self.assertTrue(np.all(np.diff(simpson) >= 0))

    def test_horizon_and_rule_checks(self):
        with self.assertRaises(TableHorizonTooShort):
            chi_total(self.model, 1, 5.0, self.table)
        with self.assertRaises(ValidationError):
            chi_total(self.model, 1, -1.0, self.table)
        with self.assertRaises(ValidationError):
            chi_total_curve(self.model, 1, self.table, rule='midpoint')

    def test_steady_state(self):
        vector = steady_state_cumulants(self.model, 2, tol=1e-8, torus_side=8)
        self.assertEqual(vector.time_label, INFINITY)
        self.assertAlmostEqual(vector.values[0], 0.2 / 0.7, delta=1e-7)
        self.assertGreater(vector.values[1], 0)
        self.assertGreaterEqual(vector.bound_constant, 1.0)
        self.assertLessEqual(vector.values[1], 2 * vector.bound_constant ** 2 * 0.2 / 0.7)

    def test_steady_state_budget(self):
        with self.assertRaises(NoConvergenceWithinBudget):
            steady_state_cumulants(self.model, 1, tol=1e-14, torus_side=4, initial_horizon=1.0, max_horizon=3.0)


class TestGaltonWatson(unittest.TestCase):
    def setUp(self):
        self.model = validate(make_params(beta=(0.2, 0.1)))

    def test_boundary_values(self):
        self.assertAlmostEqual(gw_generating_function(self.model, 1.0, 3.0), 1.0, places=12)
        self.assertEqual(gw_generating_function(self.model, 0.3, 0.0), 0.3)
        with self.assertRaises(ValidationError):
            gw_generating_function(self.model, 1.5, 1.0)

    def test_extinction_probability_increases_to_one(self):
        times = np.linspace(0.0, 60.0 / self.model.delta, 121)
        psi = gw_generating_function(self.model, 0.0, times)
        self.assertTrue(np.all(np.diff(psi) >= -1e-14))
        self.assertAlmostEqual(psi[-1], 1.0, delta=1e-6)

    def test_pure_death_closed_form(self):
        model = validate(make_params(beta=()))
        for z in (0.0, 0.4):
            expected = 1 - (1 - z) * math.exp(-1.0)
            self.assertAlmostEqual(gw_generating_function(model, z, 1.0), expected, delta=1e-6)

    def test_factorial_moments(self):
        """E nu(t) = e^{-Delta t}; the second factorial moment matches the L = 1 hierarchy"""
        for t in (0.5, 2.0):
            mean, second = gw_factorial_moments(self.model, t, order=2)
            self.assertAlmostEqual(mean, math.exp(-self.model.delta * t), delta=1e-6)
            table = solve_hierarchy(self.model, 1, 2, uniform_grid(t, 0.05))
            self.assertAlmostEqual(second, table.order(2)[-1, 0], delta=1e-5)
        with self.assertRaises(ValidationError):
            gw_factorial_moments(self.model, 1.0, order=5)

    def test_higher_factorial_moments(self):
        """Orders 3 and 4 from the wide stencil agree with the collapsed-torus hierarchy"""
        t = 2.0
        differences = gw_factorial_moments(self.model, t, order=4)
        table = solve_hierarchy(self.model, 1, 4, uniform_grid(t, 0.05))
        for k in (3, 4):
            exact = table.order(k)[-1, 0]
            self.assertGreater(exact, 0)
            self.assertAlmostEqual(differences[k - 1], exact, delta=1e-2 * exact + 1e-6)


class TestEmpiricalCumulants(unittest.TestCase):
    def test_poisson_samples(self):
        rng = np.random.default_rng(7)
        samples = rng.poisson(2.0, size=20000)
        chi, se = empirical_factorial_cumulants(samples, order=2)
        self.assertLess(abs(chi.values[0] - 2.0), 4 * se[0])
        self.assertLess(abs(chi.values[1]), 4 * se[1])

    def test_too_few_samples(self):
        with self.assertRaises(ValidationError):
            empirical_factorial_cumulants([1, 2, 3], n_batches=20)


if __name__ == '__main__':
    unittest.main()
