import math
import unittest
from unittest.mock import patch

import numpy as np
from scipy.stats import poisson

from errors import BudgetExceeded, InsufficientSamples, TruncationTooCoarse, ValidationError
from oracle import (
    TruncatedStateSpace,
    boundary_mass,
    build_generator,
    choose_cap,
    compare_to_simulation,
    distribution_at,
    marginal,
    oracle_mean,
    truncation_gap,
)
from simulator import SimConfig, run_ensemble
from test_model import make_params


class TestStateSpace(unittest.TestCase):
    def test_mixed_radix(self):
        space = TruncatedStateSpace(torus_side=3, dimension=1, cap=2)
        self.assertEqual(space.size, 27)
        self.assertEqual(space.encode([1, 0, 2]), 1 + 2 * 9)
        np.testing.assert_array_equal(space.decode(19), [1, 0, 2])
        states = space.all_states()
        self.assertEqual(states.shape, (27, 3))
        for index in (0, 5, 26):
            self.assertEqual(space.encode(states[index]), index)

    def test_sites_wrap(self):
        space = TruncatedStateSpace(torus_side=3, dimension=2, cap=1)
        self.assertEqual(space.site_index((-1, 0)), space.site_index((2, 0)))
        self.assertEqual(space.site_coordinates(space.site_index((1, 2))), (1, 2))

    def test_rejections(self):
        with self.assertRaises(BudgetExceeded):
            TruncatedStateSpace(torus_side=4, dimension=2, cap=4, budget=1000)
        space = TruncatedStateSpace(torus_side=2, dimension=1, cap=1)
        with self.assertRaises(ValidationError):
            space.encode([2, 0])
        with self.assertRaises(ValidationError):
            space.decode(4)


class TestGenerator(unittest.TestCase):
    def test_generator_structure(self):
        """Zero row sums, nonnegative off-diagonal rates"""
        generator = build_generator(make_params(beta=(0.2, 0.1)), 3, 3)
        matrix = generator.matrix.toarray()
        np.testing.assert_allclose(matrix.sum(axis=1), 0.0, atol=1e-12)
        off_diagonal = matrix - np.diag(np.diag(matrix))
        self.assertGreaterEqual(off_diagonal.min(), 0.0)
        self.assertTrue(np.all(generator.blocked_rates >= 0))

    def test_no_events_gives_zero_matrix(self):
        generator = build_generator(make_params(gamma=0.0), 3, 0)
        self.assertEqual(generator.space.size, 1)
        np.testing.assert_array_equal(generator.matrix.toarray(), [[0.0]])
        np.testing.assert_array_equal(distribution_at(generator, 5.0), [1.0])

    def test_immigration_death_is_poisson(self):
        """Without motion or splitting each site holds a Poisson(gamma(1-e^{-mu t})/mu) count"""
        params = make_params(beta=(), kappa=0.0, gamma=0.5)
        generator = build_generator(params, 1, 12)
        for t in (0.5, 2.0):
            law = marginal(generator.space, distribution_at(generator, t))
            expected = poisson.pmf(np.arange(13), 0.5 * -math.expm1(-t) / 1.0)
            np.testing.assert_allclose(law, expected, atol=1e-10)

    def test_uniformization_matches_expm(self):
        generator = build_generator(make_params(beta=(0.3,)), 2, 3)
        direct = distribution_at(generator, 1.5)
        with patch('config.UNIFORMIZATION_MAX_JUMPS', 0):
            fallback = distribution_at(generator, 1.5)
        np.testing.assert_allclose(direct, fallback, atol=1e-10)
        self.assertAlmostEqual(direct.sum(), 1.0, delta=1e-10)

    def test_negative_time(self):
        generator = build_generator(make_params(), 1, 2)
        with self.assertRaises(ValidationError):
            distribution_at(generator, -1.0)


class TestTruncation(unittest.TestCase):
    def setUp(self):
        self.params = make_params(beta=(0.2,), kappa=0.5, gamma=0.3)

    def test_choose_cap_and_mean(self):
        """The oracle mean matches gamma(1 - e^{-Delta t})/Delta once the boundary mass is negligible"""
        generator, laws = choose_cap(self.params, 3, [1.0, 3.0])
        for t, law in laws.items():
            self.assertLess(boundary_mass(generator.space, law), 1e-6)
            exact = 0.3 * -math.expm1(-0.8 * t) / 0.8
            self.assertAlmostEqual(oracle_mean(generator.space, law), exact, delta=1e-5)

    def test_budget_exhausted(self):
        with self.assertRaises(TruncationTooCoarse):
            choose_cap(self.params, 3, [3.0], start=1, budget=30)

    def test_raising_cap_stays_within_overflow_bound(self):
        tv, bound = truncation_gap(self.params, 2, 3, 2.0)
        self.assertLessEqual(tv, bound + 1e-12)
        self.assertGreater(bound, 0.0)


class TestGoodnessOfFit(unittest.TestCase):
    def setUp(self):
        self.law = poisson.pmf(np.arange(10), 1.2)
        self.law[-1] += poisson.sf(9, 1.2)

    def test_samples_from_the_law_fit(self):
        rng = np.random.default_rng(3)
        histogram = np.bincount(rng.choice(10, size=5000, p=self.law), minlength=10)
        report = compare_to_simulation(self.law, histogram)
        self.assertGreater(report.p_value, 1e-3)
        self.assertEqual(report.samples, 5000)
        self.assertTrue(all(e >= 5 for e in report.expected))
        self.assertEqual(report.dof, len(report.bins) - 1)

    def test_shifted_samples_rejected(self):
        rng = np.random.default_rng(4)
        histogram = np.bincount(rng.poisson(1.5, size=5000))
        self.assertLess(compare_to_simulation(self.law, histogram).p_value, 1e-6)

    def test_guards(self):
        with self.assertRaises(TruncationTooCoarse):
            compare_to_simulation(self.law, [10, 10], boundary=1e-3)
        with self.assertRaises(InsufficientSamples):
            compare_to_simulation(self.law, [2, 1])
        with self.assertRaises(InsufficientSamples):
            compare_to_simulation(self.law, [])

    def test_simulator_agrees_with_oracle(self):
        """Monte Carlo counts at the origin of a 3-site torus fit the master-equation marginal"""
        params = make_params(beta=(0.2,), kappa=0.5, gamma=0.3)
        generator, laws = choose_cap(params, 3, [1.0])
        cfg = SimConfig(torus_side=3, t_max=1.0, record_times=(1.0,), seed=8)
        stats = run_ensemble(params, cfg, 4000, allow_small_torus=True)
        law = laws[1.0]
        report = compare_to_simulation(marginal(generator.space, law), stats.counts_histogram(0),
                                       boundary=boundary_mass(generator.space, law))
        self.assertGreater(report.p_value, 1e-4)


if __name__ == '__main__':
    unittest.main()
