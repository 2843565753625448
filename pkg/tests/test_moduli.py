"""
Unit tests for moduli-space geometry in vortexlab.

This module tests:
- Polynomial chart and zero coordinates
- Gauge projection of field variations
- The kinetic metric for one vortex
- Pair metric oracle and geodesic integration
- Scattering angle and zero matching
"""

import unittest
import sys
import os
import shutil
import tempfile
import warnings

import numpy as np

# Add the parent directory to the path so we can import our modules
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from models import FieldConfig, GeodesicState, ModuliPoint, SolverParams
from utils.errors import NearCoincidence, NearCoincidenceWarning, ScatteringError
from utils.lattice import LatticeOps
from utils.moduli import GeodesicFlow, ModuliSpace, PairMetric, flat_metric


class TestModuliPoint(unittest.TestCase):
    """Test chart coordinates."""

    def test_chart_round_trip(self):
        """Test that chart coefficients recover the zeros."""
        q = ModuliPoint([1.0 + 2.0j, -0.5 + 0.25j, 3.0 - 1.0j])
        back = ModuliPoint.from_chart_coords(q.chart_coords())
        self.assertLess(GeodesicFlow.match_zeros(back.zeros, q.zeros), 1e-10)

    def test_chart_of_pair(self):
        """Test c1 = -(z1 + z2) and c2 = z1 z2."""
        q = ModuliPoint([2.0 + 0j, -2.0 + 0j])
        np.testing.assert_allclose(q.chart, [0.0, -4.0], atol=1e-12)

    def test_zeros_are_unordered(self):
        """Test that labelling does not change the point."""
        a = ModuliPoint([1.0 + 1.0j, -1.0 + 0.5j])
        b = ModuliPoint([-1.0 + 0.5j, 1.0 + 1.0j])
        np.testing.assert_allclose(a.chart_coords(), b.chart_coords())
        np.testing.assert_allclose(a.zero_coords(), b.zero_coords())

    def test_chart_velocity(self):
        """Test the pushforward of zero velocities for d = 2."""
        zeros = [-2.0 + 0j, 2.0 + 0j]
        q = ModuliPoint(zeros)
        x = q.chart_velocity([0.5, -0.5], zeros=zeros)
        # c1' = -(v1 + v2) = 0, c2' = v1 z2 + v2 z1 = 2
        np.testing.assert_allclose(x, [0.0, 0.0, 2.0, 0.0], atol=1e-12)

    def test_min_separation(self):
        """Test the closest pair distance."""
        self.assertTrue(np.isinf(ModuliPoint([0j]).min_separation()))
        self.assertAlmostEqual(ModuliPoint([0j, 3 + 4j, 10 + 0j]).min_separation(), 5.0)


class TestGaugeProjection(unittest.TestCase):
    """Test removal of gauge directions."""

    def setUp(self):
        """Set up a smooth background and a random variation."""
        self.grid = LatticeOps.make_grid('disk', 4.0, 32)
        rng = np.random.default_rng(3)
        x, y = self.grid.mesh()
        phi = np.tanh(np.hypot(x, y) + 0.3) * np.exp(1j * 0.2 * x)
        a = 0.1 * np.sin(y)
        self.cfg = FieldConfig(a * self.grid.link_mask(0), np.zeros_like(a), phi)
        self.variation = (rng.normal(size=x.shape) * self.grid.link_mask(0),
                          rng.normal(size=x.shape) * self.grid.link_mask(1),
                          rng.normal(size=x.shape) + 1j * rng.normal(size=x.shape))
        self.rng = rng

    def test_orthogonal_to_gauge_orbit(self):
        """Test <P v, (d chi, -i chi Phi)> = 0 for random chi."""
        projected = ModuliSpace.gauge_fix_variation(self.cfg, self.variation, self.grid)
        scale = LatticeOps.inner_product(projected, projected, self.grid)
        for _ in range(3):
            chi = self.rng.normal(size=self.cfg.phi.shape)
            gauge = ModuliSpace.pure_gauge(self.cfg, chi, self.grid)
            overlap = LatticeOps.inner_product(projected, gauge, self.grid)
            norm = np.sqrt(scale * LatticeOps.inner_product(gauge, gauge, self.grid))
            self.assertLess(abs(overlap), 1e-9 * norm)

    def test_idempotent(self):
        """Test P P v = P v."""
        project = ModuliSpace.gauge_projector(self.cfg, self.grid)
        once = project(self.variation)
        twice = project(once)
        for a, b in zip(once, twice):
            np.testing.assert_allclose(a, b, atol=1e-9)

    def test_pure_gauge_removed(self):
        """Test that a pure gauge direction projects to zero."""
        chi = self.rng.normal(size=self.cfg.phi.shape)
        gauge = ModuliSpace.pure_gauge(self.cfg, chi, self.grid)
        projected = ModuliSpace.gauge_fix_variation(self.cfg, gauge, self.grid)
        self.assertLess(LatticeOps.inner_product(projected, projected, self.grid),
                        1e-16 * LatticeOps.inner_product(gauge, gauge, self.grid))

    def test_rejects_non_finite(self):
        """Test that NaN variations are refused."""
        bad = (self.variation[0] * np.nan, self.variation[1], self.variation[2])
        with self.assertRaises(ValueError):
            ModuliSpace.gauge_fix_variation(self.cfg, bad, self.grid)


class TestKineticMetric(unittest.TestCase):
    """Test the field-theoretic metric for one vortex."""

    @classmethod
    def setUpClass(cls):
        """Compute the d = 1 metric once."""
        cls.grid = LatticeOps.make_grid('disk', 6.0, 48)
        cls.params = SolverParams(tol=1e-9)
        cls.q = ModuliPoint([0.2 + 0.1j])
        cls.metric = ModuliSpace.t_metric(cls.q, cls.grid, cls.params, fd_step=1e-2, n_jobs=1)

    def test_flat_single_vortex(self):
        """Test g = pi I for d = 1."""
        np.testing.assert_allclose(self.metric.g, np.pi * np.eye(2), atol=0.05 * np.pi)
        self.assertTrue(self.metric.is_spd())
        np.testing.assert_allclose(self.metric.g, self.metric.g.T)

    def test_zero_coordinates_agree(self):
        """Test that c1 = -z gives the same metric in both coordinates."""
        other = ModuliSpace.t_metric(self.q, self.grid, self.params, fd_step=1e-2, coordinates='zeros', n_jobs=1)
        np.testing.assert_allclose(other.g, self.metric.g, rtol=1e-6, atol=1e-8)

    def test_translational_energy(self):
        """Test that a moving vortex carries pi |v|^2 / 2."""
        kinetic = ModuliSpace.translational_kinetic_energy(self.q, 1.0 + 0j, self.grid, self.params)
        self.assertAlmostEqual(kinetic, 0.5 * np.pi, delta=0.05 * np.pi)

    def test_cache_matches(self):
        """Test that the joblib cache returns the same matrix."""
        cache_dir = tempfile.mkdtemp()
        try:
            first = ModuliSpace.t_metric(self.q, self.grid, self.params, 1e-2, 'chart', 1, cache_dir)
            second = ModuliSpace.t_metric(self.q, self.grid, self.params, 1e-2, 'chart', 1, cache_dir)
            np.testing.assert_allclose(first.g, self.metric.g, rtol=1e-10)
            np.testing.assert_allclose(second.g, first.g)
        finally:
            shutil.rmtree(cache_dir, ignore_errors=True)

    def test_near_coincidence_in_zero_coordinates(self):
        """Test rejection of zeros closer than two difference steps."""
        q = ModuliPoint([0.0 + 0j, 0.015 + 0j])
        with self.assertRaises(NearCoincidence):
            ModuliSpace.t_metric(q, self.grid, self.params, fd_step=1e-2, coordinates='zeros')

    def test_translation_invariance(self):
        """Test that shifting a pair leaves the metric in zero coordinates unchanged."""
        pair = ModuliPoint([-1.0 + 0j, 1.0 + 0j])
        shifted = ModuliPoint([-0.5 + 0.5j, 1.5 + 0.5j])
        g = ModuliSpace.t_metric(pair, self.grid, self.params, fd_step=1e-2, coordinates='zeros', n_jobs=1).g
        g_shifted = ModuliSpace.t_metric(shifted, self.grid, self.params, fd_step=1e-2,
                                         coordinates='zeros', n_jobs=1).g
        np.testing.assert_allclose(g_shifted, g, atol=0.05 * np.pi)

    def test_torus_rejected(self):
        """Test that the metric is a disk computation."""
        torus = LatticeOps.make_grid('torus', 12.0, 32)
        with self.assertRaises(ValueError):
            ModuliSpace.t_metric(self.q, torus, self.params)

    def test_near_coincidence_warning(self):
        """Test the warning zone between two and four difference steps."""
        q = ModuliPoint([-0.015 + 0j, 0.015 + 0j])
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter('always')
            metric = ModuliSpace.t_metric(q, self.grid, self.params, fd_step=1e-2, coordinates='zeros', n_jobs=1)
        self.assertTrue(any(issubclass(w.category, NearCoincidenceWarning) for w in caught))
        self.assertEqual(metric.g.shape, (4, 4))


class TestPairMetric(unittest.TestCase):
    """Test the d = 2 metric oracle."""

    def setUp(self):
        """Set up the large-separation oracle."""
        self.oracle = PairMetric.asymptotic()

    def test_asymptotic_factor(self):
        """Test F(r) = pi / (2 r) at large r, continued past the table."""
        self.assertAlmostEqual(self.oracle.conformal_factor(10.0), np.pi / 20.0, places=4)
        self.assertAlmostEqual(self.oracle.conformal_factor(100.0), np.pi / 200.0, places=6)

    def test_symmetric_positive(self):
        """Test that the oracle returns SPD matrices."""
        for x in ([0.0, 0.0, -4.0, 0.0], [1.0, -0.5, 0.3, 2.0], [0.0, 0.0, 0.0, 0.0]):
            g = self.oracle(np.array(x))
            np.testing.assert_allclose(g, g.T)
            self.assertGreater(np.linalg.eigvalsh(g).min(), 0.0)

    def test_centre_of_mass_block(self):
        """Test 2 pi |dw|^2 with w = -c1 / 2 when c1 = 0."""
        g = self.oracle(np.array([0.0, 0.0, -4.0, 0.0]))
        self.assertAlmostEqual(g[0, 0], 0.5 * np.pi, places=10)
        self.assertAlmostEqual(g[1, 1], 0.5 * np.pi, places=10)

    def test_flat_metric(self):
        """Test the one-vortex oracle."""
        np.testing.assert_allclose(flat_metric()(np.zeros(2)), np.pi * np.eye(2))


class TestPairMetricFromFields(unittest.TestCase):
    """Test the pair factor tabulated from solved fields."""

    @classmethod
    def setUpClass(cls):
        """Tabulate F on a small disk once."""
        cls.grid = LatticeOps.make_grid('disk', 8.0, 64)
        cls.radii = [0.25, 0.5, 1.0, 2.0, 3.0, 4.0, 9.0]
        cls.oracle = PairMetric.from_fields(cls.radii, cls.grid, SolverParams(tol=1e-9), fd_step=1e-2, n_jobs=1)

    def test_values_positive(self):
        """Test that every tabulated factor is positive and decays outward."""
        self.assertTrue(np.all(self.oracle.values > 0.0))
        self.assertGreater(self.oracle.conformal_factor(1.0), self.oracle.conformal_factor(9.0))

    def test_matches_asymptotic_at_large_separation(self):
        """Test F(9) against pi / (2 |eta|) for zeros six apart."""
        expected = PairMetric.asymptotic().conformal_factor(9.0)
        self.assertAlmostEqual(self.oracle.conformal_factor(9.0), expected, delta=0.15 * expected)

    def test_symmetric_positive(self):
        """Test that the tabulated oracle returns SPD matrices."""
        for x in ([0.0, 0.0, -4.0, 0.0], [0.4, -0.2, 0.3, 1.0]):
            g = self.oracle(np.array(x))
            np.testing.assert_allclose(g, g.T)
            self.assertGreater(np.linalg.eigvalsh(g).min(), 0.0)

    def test_head_on_scattering(self):
        """Test right-angle scattering through the field-theoretic factor."""
        zeros = [-1.5 + 0j, 1.5 + 0j]
        q0 = ModuliPoint(zeros)
        qdot0 = q0.chart_velocity([0.5, -0.5], zeros=zeros)
        trajectory = GeodesicFlow.adiabatic_trajectory(q0, qdot0, 6.0, 0.01, self.oracle)
        self.assertAlmostEqual(GeodesicFlow.scattering_angle(trajectory), 90.0, delta=2.0)
        final = trajectory[-1].q.zeros
        self.assertLess(max(abs(z.real) for z in final), 0.1)


class TestGeodesicFlow(unittest.TestCase):
    """Test geodesic integration."""

    def test_straight_line_in_flat_metric(self):
        """Test uniform motion of one vortex."""
        q0 = ModuliPoint([1.0 + 0j])
        trajectory = GeodesicFlow.adiabatic_trajectory(q0, np.array([0.5, 0.25]), 2.0, 0.1, flat_metric())
        final = trajectory[-1].q.zeros[0]
        # c1 = -z, so z moves with -qdot
        self.assertAlmostEqual(final.real, 0.0, places=8)
        self.assertAlmostEqual(final.imag, -0.5, places=8)
        self.assertAlmostEqual(trajectory[-1].slow_time, 2.0)

    def test_christoffel_vanish_for_flat_metric(self):
        """Test Gamma = 0 for a constant metric."""
        gamma = GeodesicFlow.christoffel(np.array([0.3, 0.1]), flat_metric(), 1e-3)
        self.assertLess(np.abs(gamma).max(), 1e-10)

    def test_head_on_scattering(self):
        """Test right-angle scattering of a head-on pair."""
        zeros = [-2.0 + 0j, 2.0 + 0j]
        q0 = ModuliPoint(zeros)
        qdot0 = q0.chart_velocity([0.5, -0.5], zeros=zeros)
        trajectory = GeodesicFlow.adiabatic_trajectory(q0, qdot0, 6.0, 0.01, PairMetric.asymptotic())
        self.assertAlmostEqual(GeodesicFlow.scattering_angle(trajectory), 90.0, delta=1.0)
        final = trajectory[-1].q.zeros
        # outgoing along the imaginary axis
        self.assertLess(max(abs(z.real) for z in final), 0.05)
        self.assertGreater(min(abs(z.imag) for z in final), 0.3)

    def test_head_on_deflection(self):
        """Test that a head-on pair turns by a quarter turn in either sense."""
        zeros = [-2.0 + 0j, 2.0 + 0j]
        q0 = ModuliPoint(zeros)
        qdot0 = q0.chart_velocity([0.5, -0.5], zeros=zeros)
        trajectory = GeodesicFlow.adiabatic_trajectory(q0, qdot0, 6.0, 0.01, PairMetric.asymptotic())
        self.assertAlmostEqual(abs(GeodesicFlow.deflection_angle(trajectory)), 90.0, delta=1.0)

    def test_deflection_small_for_distant_pass(self):
        """Test that a wide pass through the flat region barely turns."""
        zeros = [-3.0 + 4.0j, 3.0 - 4.0j]
        q0 = ModuliPoint(zeros)
        qdot0 = q0.chart_velocity([0.5, -0.5], zeros=zeros)
        trajectory = GeodesicFlow.adiabatic_trajectory(q0, qdot0, 12.0, 0.01, PairMetric.asymptotic())
        self.assertLess(abs(GeodesicFlow.deflection_angle(trajectory)), 0.5)

    def test_deflection_sign_follows_impact_side(self):
        """Test that mirrored impact parameters turn in opposite senses."""
        oracle = PairMetric.asymptotic(r_min=4.0)
        angles = []
        for impact in (1.0, -1.0):
            zeros = [complex(-2.0, 0.5 * impact), complex(2.0, -0.5 * impact)]
            q0 = ModuliPoint(zeros)
            qdot0 = q0.chart_velocity([0.5, -0.5], zeros=zeros)
            trajectory = GeodesicFlow.adiabatic_trajectory(q0, qdot0, 8.0, 0.01, oracle)
            angles.append(GeodesicFlow.deflection_angle(trajectory))
        self.assertGreater(abs(angles[0]), 1.0)
        self.assertAlmostEqual(angles[0], -angles[1], delta=1e-6)
        for angle in angles:
            self.assertTrue(-180.0 < angle <= 180.0)

    def test_deflection_needs_motion(self):
        """Test that a trajectory at rest has no deflection."""
        q0 = ModuliPoint([-2.0 + 0j, 2.0 + 0j])
        trajectory = [GeodesicState(q0, np.zeros(4)) for _ in range(3)]
        with self.assertRaises(ScatteringError):
            GeodesicFlow.deflection_angle(trajectory)
        with self.assertRaises(ScatteringError):
            GeodesicFlow.deflection_angle(trajectory[:2])

    def test_time_reversal(self):
        """Test that reversing the final velocity retraces the geodesic."""
        zeros = [-1.5 + 0.3j, 1.5 - 0.3j]
        q0 = ModuliPoint(zeros)
        qdot0 = q0.chart_velocity([0.4, -0.4], zeros=zeros)
        oracle = PairMetric.asymptotic(r_min=4.0)
        forward = GeodesicFlow.adiabatic_trajectory(q0, qdot0, 3.0, 0.01, oracle)
        end = forward[-1]
        back = GeodesicFlow.adiabatic_trajectory(end.q, -np.asarray(end.qdot), 3.0, 0.01, oracle)
        self.assertLess(GeodesicFlow.match_zeros(back[-1].q.zeros, zeros), 1e-6)
        np.testing.assert_allclose(-np.asarray(back[-1].qdot), qdot0, atol=1e-6)

    def test_energy_conserved(self):
        """Test that the kinetic scalar is conserved along the geodesic."""
        zeros = [-3.0 + 0.5j, 3.0 - 0.5j]
        q0 = ModuliPoint(zeros)
        qdot0 = q0.chart_velocity([0.3, -0.3], zeros=zeros)
        trajectory = GeodesicFlow.adiabatic_trajectory(q0, qdot0, 4.0, 0.01, PairMetric.asymptotic())
        kinetic = [s.kinetic for s in trajectory]
        self.assertLess((max(kinetic) - min(kinetic)) / kinetic[0], 1e-3)

    def test_variational_agrees(self):
        """Test that the midpoint integrator tracks Runge-Kutta."""
        zeros = [-3.0 + 0.5j, 3.0 - 0.5j]
        q0 = ModuliPoint(zeros)
        qdot0 = q0.chart_velocity([0.3, -0.3], zeros=zeros)
        oracle = PairMetric.asymptotic()
        rk4 = GeodesicFlow.adiabatic_trajectory(q0, qdot0, 2.0, 0.01, oracle)
        var = GeodesicFlow.variational_trajectory(q0, qdot0, 2.0, 0.01, oracle)
        self.assertEqual(len(rk4), len(var))
        self.assertLess(GeodesicFlow.match_zeros(rk4[-1].q.zeros, var[-1].q.zeros), 1e-2)

    def test_scattering_error(self):
        """Test that a trajectory outside the ball has no angle."""
        q0 = ModuliPoint([-2.0 + 0j, 2.0 + 0j])
        trajectory = [GeodesicState(q0, np.zeros(4))]
        with self.assertRaises(ScatteringError):
            GeodesicFlow.scattering_angle(trajectory, ball_radius=0.1)

    def test_rejects_bad_step(self):
        """Test that h_step must be positive."""
        with self.assertRaises(ValueError):
            GeodesicFlow.adiabatic_trajectory(ModuliPoint([0j]), np.zeros(2), 1.0, 0.0, flat_metric())


class TestMatchZeros(unittest.TestCase):
    """Test label-free zero comparison."""

    def test_best_permutation(self):
        """Test that labels are matched optimally."""
        self.assertAlmostEqual(GeodesicFlow.match_zeros([0j, 1 + 0j], [1.1 + 0j, 0.1j]), 0.1)

    def test_hausdorff_fallback(self):
        """Test differing counts."""
        self.assertAlmostEqual(GeodesicFlow.match_zeros([0j, 2 + 0j], [0j]), 2.0)

    def test_empty(self):
        """Test empty inputs."""
        self.assertEqual(GeodesicFlow.match_zeros([], []), 0.0)
        self.assertTrue(np.isinf(GeodesicFlow.match_zeros([], [0j])))


if __name__ == '__main__':
    unittest.main()
