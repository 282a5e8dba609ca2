import gc
import unittest
import weakref
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from bodies import Ellipsoid, GraphBody, LqBall, hull, load_body
from lp_ops import polar_pi_volume
from numgrid import DomainError, sphere_grid
from shadow import (ShadowSystem, check_admissible, concavity_violation,
                    first_variation_polar_pi, hausdorff_lipschitz, perturbation_phi,
                    phi_surface_integral, reflection_deviation, shadow_body,
                    volume_invariance_check, volume_sweep)

CUBE = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=float)
TETRA = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float)
SPECS = Path(__file__).resolve().parent / "specs"


def rotated_ellipsoid() -> Ellipsoid:
    R = Rotation.from_euler("xyz", [0.4, -0.7, 1.1]).as_matrix()
    return Ellipsoid(R @ np.diag([1.0, 1.5, 2.0]) @ R.T)


class TestShadowBodies(unittest.TestCase):

    def setUp(self):
        self.u = np.array([1.0, 1.0, 1.0]) / np.sqrt(3.0)
        self.grid = sphere_grid(3, 3).aligned(self.u)
        self.tetra = ShadowSystem.of(hull(TETRA), [0.3, -0.2, 1.0])
        self.ellipsoid = ShadowSystem.of(rotated_ellipsoid(), self.u)

    def test_parameter_range(self):
        with self.assertRaises(DomainError):
            shadow_body(self.tetra, 1.5)

    def test_endpoints(self):
        """K_1 = K and K_-1 = R_u K"""
        V = self.grid.nodes
        K = self.ellipsoid.body
        np.testing.assert_allclose(shadow_body(self.ellipsoid, 1.0).support(V), K.support(V),
                                   atol=1e-10)
        mirrored = V - 2.0 * np.outer(V @ self.u, self.u)
        np.testing.assert_allclose(shadow_body(self.ellipsoid, -1.0).support(V),
                                   K.support(mirrored), atol=1e-10)

    def test_symmetral_is_symmetric(self):
        symmetral = shadow_body(self.ellipsoid, 0.0)
        V = self.grid.nodes
        mirrored = V - 2.0 * np.outer(V @ self.u, self.u)
        np.testing.assert_allclose(symmetral.support(V), symmetral.support(mirrored), atol=1e-10)

    def test_volume_is_invariant(self):
        ts = np.linspace(-1.0, 1.0, 9)
        self.assertLess(volume_invariance_check(self.tetra, ts), 1e-10)
        self.assertLess(volume_invariance_check(self.ellipsoid, ts), 1e-10)
        volumes = volume_sweep(self.tetra, ts)
        np.testing.assert_allclose(volumes, 8.0 / 3.0, rtol=1e-9)

    def test_generic_volume_is_invariant(self):
        """Fubini volumes of l4 shadow bodies share f - g"""
        S = ShadowSystem.of(LqBall(4.0), self.u, base_level=2)
        self.assertEqual(volume_invariance_check(S, (0.0, 0.5, 1.0)), 0.0)

    def test_reflection(self):
        """K_-t = R_u K_t"""
        deviation = reflection_deviation(self.tetra, (0.25, 0.5, 0.75), self.grid)
        self.assertLess(deviation, 1e-9)

    def test_hausdorff_lipschitz(self):
        ratios, bound = hausdorff_lipschitz(self.tetra, np.linspace(-1.0, 1.0, 5), self.grid)
        self.assertEqual(len(ratios), 4)
        self.assertTrue(np.all(ratios <= bound), msg=f"ratios {ratios} exceed {bound}")

    def test_graph_concavity(self):
        rng = np.random.default_rng(5)
        violation = concavity_violation(self.ellipsoid, 0.5, rng, pairs=100)
        self.assertLess(violation, 1e-9)

    def test_members_are_cached_per_system(self):
        """Each system keeps its own members and is freed with them"""
        S = ShadowSystem.of(hull(TETRA), self.u)
        self.assertIs(shadow_body(S, 0.5), shadow_body(S, 0.5))
        other = ShadowSystem.of(hull(TETRA), self.u)
        self.assertIsNot(shadow_body(other, 0.5), shadow_body(S, 0.5))
        ref = weakref.ref(S)
        del S
        gc.collect()
        self.assertIsNone(ref())

    def test_nested_shadow_graph(self):
        """A member's own graph in direction u composes shadow parameters"""
        member = shadow_body(self.tetra, 0.5)
        V = self.grid.nodes
        again = GraphBody(member.graph(self.tetra.u), 0.5)
        np.testing.assert_allclose(again.support(V), shadow_body(self.tetra, 0.25).support(V),
                                   atol=1e-9)


class TestPerturbation(unittest.TestCase):

    def setUp(self):
        self.u = np.array([1.0, 1.0, 1.0]) / np.sqrt(3.0)
        self.S = ShadowSystem.of(rotated_ellipsoid(), self.u)

    def test_admissible_quotients_converge(self):
        """Deviations shrink as t -> 1"""
        grid = sphere_grid(3, 3).aligned(self.u)
        trace = check_admissible(self.S, (0.9, 0.99, 0.999), grid)
        self.assertTrue(trace.decreasing, msg=f"deviations {trace.deviations}")
        self.assertLess(trace.deviations[-1], 1e-2)
        self.assertGreater(np.abs(trace.phi).max(), 1e-2)

    def test_skew_body_is_admissible(self):
        """A sheared, shifted l4 body goes through the generic graph path"""
        skew, _ = load_body(SPECS / "skew.json")
        S = ShadowSystem.of(skew, self.u, base_level=1)
        self.assertIsNone(shadow_body(S, 0.9).exact)
        trace = check_admissible(S, (0.9, 0.99, 0.999), sphere_grid(3, 1).aligned(S.u))
        self.assertTrue(trace.decreasing, msg=f"deviations {trace.deviations}")
        self.assertLess(trace.deviations[-1], 1e-2)

    def test_admissible_rejects_t_one(self):
        with self.assertRaises(DomainError):
            check_admissible(self.S, (0.5, 1.0), sphere_grid(3, 1))

    def test_phi_integrates_to_zero(self):
        grid = sphere_grid(3, 4).aligned(self.u)
        mass = self.S.body.surface_measure(grid).total_mass
        value = phi_surface_integral(self.S, grid)
        self.assertLess(abs(value), 1e-4 * mass, msg=f"integral of phi: {value}")

    def test_polytope_ties_are_logged(self):
        S = ShadowSystem.of(hull(CUBE), [0.0, 0.0, 1.0])
        with self.assertLogs("shadow", level="WARNING"):
            value = perturbation_phi(S, np.array([0.0, 0.0, 1.0]))
        self.assertAlmostEqual(value, 0.0, places=12)

    def test_first_variation_vanishes_for_ellipsoids(self):
        """vol(Pi_p^* K_t) is constant along ellipsoid shadow systems"""
        grid = sphere_grid(3, 3).aligned(self.u)
        reference = polar_pi_volume(self.S.body, 2.0, grid)
        variation = first_variation_polar_pi(self.S, 2.0, grid)
        self.assertLess(abs(variation) / reference, 5e-3)

    def test_first_variation_bad_steps(self):
        with self.assertRaises(DomainError):
            first_variation_polar_pi(self.S, 2.0, sphere_grid(3, 1), steps=(0.0, 0.1))


class TestPlanarShadow(unittest.TestCase):

    def setUp(self):
        pentagon = np.array([[1.0, 0.0], [0.4, 0.9], [-0.8, 0.6], [-0.7, -0.5], [0.3, -1.0]])
        self.u = np.array([0.6, 0.8])
        self.S = ShadowSystem.of(hull(pentagon), self.u)
        self.grid = sphere_grid(2, 3).aligned(self.u)

    def test_area_is_invariant(self):
        self.assertLess(volume_invariance_check(self.S, np.linspace(-1.0, 1.0, 5)), 1e-10)

    def test_reflection(self):
        self.assertLess(reflection_deviation(self.S, (0.3, 0.8), self.grid), 1e-9)


if __name__ == "__main__":
    unittest.main()
