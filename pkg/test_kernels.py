import math
import unittest

import numpy as np
from hypothesis import given, settings, strategies as st
from scipy.special import ive

from errors import (
    AsymmetricSupport,
    InvalidStepDistribution,
    NotNormalized,
    QuadratureUnderResolved,
    ReducibleSupport,
    ZeroDisplacement,
)
from kernels import (
    EffectiveWalk,
    escape_mass,
    lattice_index,
    nearest_neighbour_distribution,
    symbol,
    torus_transition_field,
    transition_probability,
    transition_window,
    validate_step_distribution,
)


def nearest_walk(d=1, kappa=1.0, spread=0.0):
    dist = nearest_neighbour_distribution(d)
    return EffectiveWalk(jump_rate_a=kappa, branch_spread_weight=spread, dist_a=dist, dist_b=dist)


class TestStepDistribution(unittest.TestCase):
    def test_nearest_neighbour(self):
        """Test the simple symmetric walk in two dimensions"""
        dist = nearest_neighbour_distribution(2)
        self.assertEqual(dist.dimension, 2)
        self.assertEqual(len(dist.entries), 4)
        self.assertAlmostEqual(dist.probabilities.sum(), 1.0, places=15)
        self.assertEqual(dist.as_dict()[(0, 1)], 0.25)

    def test_rejections(self):
        """Test that each invalid step law raises its own error"""
        with self.assertRaises(AsymmetricSupport):
            validate_step_distribution([([1], 0.7), ([-1], 0.3)])
        with self.assertRaises(ZeroDisplacement):
            validate_step_distribution([([0], 0.5), ([1], 0.25), ([-1], 0.25)])
        with self.assertRaises(NotNormalized):
            validate_step_distribution([([1], 0.5), ([-1], 0.4)])
        with self.assertRaises(ReducibleSupport):
            validate_step_distribution([([2], 0.5), ([-2], 0.5)])
        with self.assertRaises(InvalidStepDistribution):
            validate_step_distribution([])
        with self.assertRaises(InvalidStepDistribution):
            validate_step_distribution([([1], 0.5), ([-1, 0], 0.5)])

    def test_normalize_option(self):
        dist = validate_step_distribution([([1], 2.0), ([-1], 2.0)], normalize=True)
        self.assertEqual(dist.as_dict(), {(-1,): 0.5, (1,): 0.5})

    def test_lattice_index(self):
        """Test the index of generated sublattices"""
        self.assertEqual(lattice_index([(1, 0), (0, 1)], 2), 1)
        self.assertEqual(lattice_index([(1, 1), (1, -1)], 2), 2)
        self.assertEqual(lattice_index([(2, 3), (3, 5)], 2), 1)
        self.assertEqual(lattice_index([(1, 0)], 2), 0)

    def test_diagonal_support_is_reducible(self):
        raw = [([s1, s2], 0.25) for s1 in (1, -1) for s2 in (1, -1)]
        with self.assertRaises(ReducibleSupport):
            validate_step_distribution(raw)

    def test_longer_range_support(self):
        """Steps of size 2 and 3 together generate Z"""
        raw = [([2], 0.25), ([-2], 0.25), ([3], 0.25), ([-3], 0.25)]
        dist = validate_step_distribution(raw)
        self.assertEqual(dist.dimension, 1)


class TestSymbol(unittest.TestCase):
    def test_symbol_values(self):
        dist = nearest_neighbour_distribution(1)
        self.assertAlmostEqual(symbol(dist, 0.0), 1.0)
        k = np.linspace(-np.pi, np.pi, 7).reshape(-1, 1)
        np.testing.assert_allclose(symbol(dist, k), np.cos(k[:, 0]), atol=1e-15)

    @given(st.floats(-math.pi, math.pi), st.floats(-math.pi, math.pi))
    def test_symbol_bounded_and_even(self, k1, k2):
        dist = nearest_neighbour_distribution(2)
        k = np.array([k1, k2])
        value = symbol(dist, k)
        self.assertLessEqual(abs(value), 1.0 + 1e-15)
        self.assertAlmostEqual(value, symbol(dist, -k), places=14)


class TestTransitionProbability(unittest.TestCase):
    def test_time_zero_is_point_mass(self):
        walk = nearest_walk()
        self.assertEqual(transition_probability(walk, 0.0, [0], [0]), 1.0)
        self.assertEqual(transition_probability(walk, 0.0, [3], [0]), 0.0)

    def test_frozen_walk(self):
        """Both rates zero give p(t,x,y) = delta_x(y)"""
        walk = nearest_walk(kappa=0.0)
        self.assertTrue(walk.is_frozen)
        self.assertEqual(transition_probability(walk, 5.0, [0], [0]), 1.0)
        self.assertEqual(transition_probability(walk, 5.0, [1], [0]), 0.0)
        window = transition_window(walk, 2.0, 3)
        self.assertEqual(window.sum(), 1.0)
        self.assertEqual(window[3], 1.0)

    def test_bessel_closed_form(self):
        """On Z the nearest-neighbour kernel is e^{-rt} I_n(rt)"""
        for rate, spread in ((1.0, 0.0), (0.5, 0.3)):
            walk = nearest_walk(kappa=rate, spread=spread)
            total = rate + spread
            for t in (0.5, 2.0, 5.0):
                for n in (0, 1, 4):
                    expected = ive(n, total * t)
                    self.assertAlmostEqual(transition_probability(walk, t, [n], [0]), expected, delta=1e-9)

    def test_window_properties(self):
        """Test normalization, symmetry and the maximum at the origin"""
        walk = nearest_walk(d=2)
        window = transition_window(walk, 1.5, 20)
        self.assertAlmostEqual(window.sum(), 1.0, delta=1e-9)
        self.assertEqual(np.unravel_index(window.argmax(), window.shape), (20, 20))
        np.testing.assert_allclose(window, window[::-1, ::-1], atol=1e-14)
        np.testing.assert_allclose(window, window.T, atol=1e-14)
        self.assertLess(escape_mass(walk, 1.5, 20), 1e-9)

    def test_translation_invariance(self):
        walk = nearest_walk()
        self.assertAlmostEqual(transition_probability(walk, 1.0, [5], [3]),
                               transition_probability(walk, 1.0, [2], [0]), places=14)

    def test_chapman_kolmogorov(self):
        """sum_z p(s,x,z) p(t-s,z,y) = p(t,x,y) on a window holding all the mass"""
        walk = nearest_walk(kappa=1.0, spread=0.3)
        radius = 40
        for s, t, y in ((0.7, 2.0, 3), (1.0, 1.5, 0), (0.2, 4.0, 5)):
            first = transition_window(walk, s, radius)
            second = transition_window(walk, t - s, radius)
            composed = float(np.dot(first[y:], second[:len(second) - y]))
            self.assertAlmostEqual(composed, transition_probability(walk, t, [0], [y]), delta=1e-10)

    def test_convolution_damping(self):
        """sum_v b(v) p(t,-v,0) <= p(t,0,0)"""
        dist_b = validate_step_distribution([((1,), 0.3), ((-1,), 0.3), ((2,), 0.2), ((-2,), 0.2)])
        walk = EffectiveWalk(jump_rate_a=1.0, branch_spread_weight=0.4,
                             dist_a=nearest_neighbour_distribution(1), dist_b=dist_b)
        radius = 30
        for t in (0.1, 0.5, 2.0, 8.0):
            window = transition_window(walk, t, radius)
            smeared = sum(p * window[radius - z[0]] for z, p in dist_b.entries)
            self.assertLessEqual(smeared, window[radius] + 1e-12)

    def test_oversized_window(self):
        walk = nearest_walk()
        with self.assertRaises(QuadratureUnderResolved):
            transition_window(walk, 1.0, 200, level=8)

    def test_negative_time(self):
        with self.assertRaises(ValueError):
            transition_probability(nearest_walk(), -1.0, [0], [0])


class TestTorusKernel(unittest.TestCase):
    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.0, 10.0), st.integers(1, 24), st.integers(1, 2))
    def test_normalized_with_origin_maximum(self, t, side, d):
        field = torus_transition_field(nearest_walk(d=d), t, side)
        self.assertAlmostEqual(field.sum(), 1.0, delta=1e-12)
        self.assertGreaterEqual(field.min(), -1e-14)
        self.assertLessEqual(field.max() - field.flat[0], 1e-14)

    def test_matches_infinite_lattice_when_wide(self):
        walk = nearest_walk()
        field = torus_transition_field(walk, 2.0, 64)
        window = transition_window(walk, 2.0, 5)
        np.testing.assert_allclose(np.roll(field, 5)[:11], window, atol=1e-12)


if __name__ == '__main__':
    unittest.main()
