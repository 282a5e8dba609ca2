import json
import os
import tempfile
import unittest
from unittest import mock

import numpy as np

from bodies import (AffineImage, Ellipsoid, GraphBody, LqBall, Polytope, RankError, RootGraph, SpecError,
                    apply_linear, body_from_spec, body_to_spec, diameter, graph_functions, hull,
                    load_body, radial, reflect, sampled_body, sp_integral, spd_sqrt, steiner,
                    sup_distance, support, volume)
from numgrid import DomainError, sphere_grid

CUBE = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=float)
TETRA = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float)


class TestPolytope(unittest.TestCase):

    def setUp(self):
        self.cube = hull(CUBE)
        self.grid = sphere_grid(3, 2)

    def test_cube_facets_and_edges(self):
        """Coplanar Qhull triangles merge into 6 square facets"""
        self.assertIsInstance(self.cube, Polytope)
        self.assertEqual(len(self.cube.facets), 6)
        self.assertEqual(len(self.cube.edges), 12)
        for facet in self.cube.facets:
            self.assertAlmostEqual(facet.area, 4.0, places=10)
            self.assertAlmostEqual(facet.offset, 1.0, places=10)

    def test_cube_volume_and_measure(self):
        self.assertAlmostEqual(self.cube.volume(), 8.0, places=10)
        measure = self.cube.surface_measure()
        self.assertAlmostEqual(measure.total_mass, 24.0, places=10)
        np.testing.assert_allclose(measure.first_moment(), 0.0, atol=1e-10)

    def test_cube_support_and_gauge(self):
        """h = l1 norm and gauge = sup norm"""
        v = np.array([0.3, -0.5, 0.2])
        self.assertAlmostEqual(support(self.cube, v), 1.0, places=12)
        self.assertAlmostEqual(self.cube.gauge(np.array([[0.5, 0.0, 0.1]]))[0], 0.5, places=12)
        self.assertAlmostEqual(radial(self.cube, [0.0, 0.0, 2.0]), 0.5, places=12)

    def test_tetrahedron_volume(self):
        tetra = hull(TETRA)
        self.assertEqual(len(tetra.facets), 4)
        self.assertAlmostEqual(tetra.volume(), 8.0 / 3.0, places=10)
        self.assertAlmostEqual(volume(tetra, sphere_grid(3, 4)) / (8.0 / 3.0), 1.0, places=2)

    def test_hull_rank_error(self):
        """Coplanar points do not span R^3"""
        flat = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)
        with self.assertRaises(RankError):
            hull(flat)

    def test_origin_outside(self):
        shifted = hull(CUBE + 2.0)
        with self.assertRaises(DomainError):
            shifted.gauge(np.array([[1.0, 0.0, 0.0]]))
        with self.assertRaises(DomainError):
            sp_integral(shifted, None, 2.0)

    def test_diameter_and_distance(self):
        """The grid contains the cube diagonals"""
        self.assertAlmostEqual(diameter(self.cube, self.grid), 2.0 * np.sqrt(3.0), places=10)
        self.assertAlmostEqual(sup_distance(self.cube, reflect(self.cube, [1, 0, 0]), self.grid),
                               0.0, places=10)

    def test_linear_image_volume(self):
        A = np.array([[2.0, 1.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.5, 3.0]])
        image = apply_linear(self.cube, A)
        self.assertAlmostEqual(image.volume(), 8.0 * abs(np.linalg.det(A)), places=8)

    def test_sampled_body_is_consistent(self):
        """Support samples of a convex body need no repair"""
        body, repair = sampled_body(self.grid, self.cube.support(self.grid.nodes))
        self.assertLess(repair, 1e-9)
        self.assertGreaterEqual(body.volume(), 8.0 - 1e-9)
        self.assertLess(sup_distance(body, self.cube, self.grid), 1e-9)

    def test_graph_functions_of_cube(self):
        graph = graph_functions(self.cube, [0, 0, 1])
        points = np.array([[0.2, -0.3], [0.9, 0.9], [0.0, 0.0]])
        f, g = graph.heights(points)
        np.testing.assert_allclose(f, 1.0, atol=1e-12)
        np.testing.assert_allclose(g, -1.0, atol=1e-12)
        with self.assertRaises(DomainError):
            graph.heights(np.array([[1.5, 0.0]]))
        f, _ = graph.heights(np.array([[1.5, 0.0]]), strict=False)
        self.assertTrue(np.isnan(f[0]))

    def test_steiner_preserves_volume(self):
        u = np.array([1.0, 1.0, 1.0]) / np.sqrt(3.0)
        symmetral = steiner(self.cube, u)
        self.assertAlmostEqual(symmetral.volume(), 8.0, places=8)
        V = self.grid.nodes
        mirrored = V - 2.0 * np.outer(V @ u, u)
        np.testing.assert_allclose(symmetral.support(V), symmetral.support(mirrored), atol=1e-9)

    def test_steiner_is_idempotent(self):
        u = np.array([0.3, -0.4, 1.0])
        grid = sphere_grid(3, 1)
        for name, K in (("tetrahedron", hull(TETRA)), ("l4_ball", LqBall(4.0))):
            once = steiner(K, u, base_level=2)
            twice = steiner(once, u, base_level=2)
            self.assertLessEqual(sup_distance(once, twice, grid), 1e-8, msg=name)


class TestSmoothBodies(unittest.TestCase):

    def setUp(self):
        self.grid = sphere_grid(3, 3)
        self.ball = Ellipsoid(np.eye(3))
        self.ellipsoid = Ellipsoid(np.diag([1.0, 1.5, 2.0]))
        self.l4 = LqBall(4.0)

    def test_ball_measure(self):
        """S(B, .) is the spherical Lebesgue measure"""
        measure = self.ball.surface_measure(self.grid)
        self.assertAlmostEqual(measure.total_mass / (4.0 * np.pi), 1.0, places=10)
        np.testing.assert_allclose(measure.offsets, 1.0, atol=1e-12)
        self.assertAlmostEqual(sp_integral(self.ball, None, 2.0, self.grid), 4.0 * np.pi, places=8)

    def test_ellipsoid_volume_and_moment(self):
        self.assertAlmostEqual(self.ellipsoid.volume(), 4.0 * np.pi, places=10)
        measure = self.ellipsoid.surface_measure(self.grid)
        np.testing.assert_allclose(measure.first_moment(), 0.0, atol=1e-10)
        self.assertAlmostEqual(volume(self.ellipsoid, self.grid) / (4.0 * np.pi), 1.0, places=3)

    def test_shifted_ellipsoid_gauge(self):
        """Radial points of a shifted ellipsoid lie on its boundary quadric"""
        E = Ellipsoid(np.diag([1.0, 2.0, 1.5]), shift=[0.3, -0.2, 0.1])
        V = self.grid.nodes[:50]
        X = E.radial(V)[:, None] * V
        Z = X - E.center
        np.testing.assert_allclose(np.einsum("ij,jk,ik->i", Z, E.Q, Z), 1.0, atol=1e-10)

    def test_origin_outside_ellipsoid(self):
        with self.assertRaises(DomainError):
            Ellipsoid(np.eye(3), shift=[2.0, 0.0, 0.0]).gauge(np.array([[1.0, 0.0, 0.0]]))
        with self.assertRaises(DomainError):
            Ellipsoid(np.diag([1.0, -1.0, 1.0]))

    def test_lq_ball_volume(self):
        """Closed form against the polar volume integral"""
        exact = self.l4.volume()
        numeric = volume(self.l4, sphere_grid(3, 4))
        self.assertAlmostEqual(numeric / exact, 1.0, places=3)
        self.assertAlmostEqual(LqBall(2.0).volume(), 4.0 * np.pi / 3.0, places=10)
        with self.assertRaises(DomainError):
            LqBall(1.0)

    def test_support_points_on_boundary(self):
        for K in (self.ellipsoid, self.l4, AffineImage(self.l4, np.diag([1.0, 2.0, 0.5]),
                                                        [0.1, 0.2, -0.1])):
            V = self.grid.nodes[::40]
            X = K.support_point(V)
            np.testing.assert_allclose(K.gauge(X), 1.0, atol=1e-8, err_msg=repr(K))
            np.testing.assert_allclose(np.einsum("ij,ij->i", X, V), K.support(V), atol=1e-10)

    def test_radial_measure_closes(self):
        """The boundary quadrature of a closed surface has zero first moment"""
        skew = AffineImage(self.l4, np.array([[1.0, 0.4, 0.0], [0.0, 1.0, 0.3], [0.0, 0.0, 1.0]]),
                           [0.1, 0.0, -0.1])
        measure = skew.surface_measure(self.grid)
        drift = np.linalg.norm(measure.first_moment()) / measure.total_mass
        self.assertLess(drift, 1e-2, msg=f"first moment drift {drift}")

    def test_ellipsoid_graph_matches_root_finding(self):
        E = Ellipsoid(np.array([[1.2, 0.3, 0.1], [0.3, 0.9, 0.0], [0.1, 0.0, 1.4]]),
                      shift=[0.1, 0.0, 0.2])
        u = np.array([0.0, 0.6, 0.8])
        closed, roots = E.graph(u), RootGraph(E, u)
        points = np.array([[0.1, 0.2], [-0.3, 0.0], [0.0, 0.0]])
        f1, g1 = closed.heights(points)
        f2, g2 = roots.heights(points)
        np.testing.assert_allclose(f1, f2, atol=1e-8)
        np.testing.assert_allclose(g1, g2, atol=1e-8)

    def test_shifted_affine_chords_use_the_level_function(self):
        """Chords of a shifted affine image never go through its bisected gauge"""
        L = np.array([[1.0, 0.4, 0.0], [0.0, 1.0, 0.2], [0.0, 0.0, 1.0]])
        shift = np.array([0.05, -0.02, 0.03])
        image = AffineImage(LqBall(2.0), L, shift)
        exact = Ellipsoid(spd_sqrt(L @ L.T), shift)
        u = np.array([0.3, -0.4, 1.0]) / np.linalg.norm([0.3, -0.4, 1.0])
        points = np.array([[0.1, 0.2], [-0.3, 0.0], [0.0, 0.0]])
        with mock.patch.object(AffineImage, "gauge", side_effect=AssertionError("gauge called")):
            f, g = graph_functions(image, u).heights(points)
        f_exact, g_exact = exact.graph(u).heights(points)
        np.testing.assert_allclose(f, f_exact, atol=1e-8)
        np.testing.assert_allclose(g, g_exact, atol=1e-8)

    def test_shifted_affine_member_support(self):
        """Compass search on a generic member agrees with the exact sheared ellipsoid"""
        L = np.array([[1.0, 0.4, 0.0], [0.0, 1.0, 0.2], [0.0, 0.0, 1.0]])
        shift = np.array([0.05, -0.02, 0.03])
        image = AffineImage(LqBall(2.0), L, shift)
        exact = Ellipsoid(spd_sqrt(L @ L.T), shift)
        u = np.array([0.3, -0.4, 1.0]) / np.linalg.norm([0.3, -0.4, 1.0])
        V = sphere_grid(3, 2).nodes[::16]
        member = GraphBody(graph_functions(image, u), 0.95)
        self.assertIsNone(member.exact)
        np.testing.assert_allclose(member.support(V), exact.graph(u).sheared(0.95).support(V),
                                   atol=1e-6)

    def test_graph_body_volume_is_invariant(self):
        """Fubini volume of an l4 shadow body matches the closed form"""
        u = np.array([1.0, 2.0, 2.0]) / 3.0
        graph = graph_functions(self.l4, u)
        for t in (1.0, 0.0, -0.5):
            member = GraphBody(graph, t)
            self.assertIsNone(member.exact)
            self.assertAlmostEqual(member.volume() / self.l4.volume(), 1.0, places=3)

    def test_graph_body_at_one_is_the_body(self):
        u = np.array([0.0, 0.0, 1.0])
        member = GraphBody(graph_functions(self.l4, u), 1.0)
        V = sphere_grid(3, 1).nodes
        np.testing.assert_allclose(member.support(V), self.l4.support(V), atol=1e-7)
        pushed = GraphBody(graph_functions(self.l4, u), 1.0, pushforward=True)
        source = self.l4.surface_measure(self.grid)
        measure = pushed.surface_measure(self.grid)
        np.testing.assert_allclose(measure.normals, source.normals, atol=1e-9)
        np.testing.assert_allclose(measure.masses, source.masses, rtol=1e-9)

    def test_sheared_ellipsoid_is_exact(self):
        u = np.array([1.0, 1.0, 1.0]) / np.sqrt(3.0)
        symmetral = steiner(self.ellipsoid, u)
        self.assertIsInstance(symmetral.exact, Ellipsoid)
        self.assertAlmostEqual(symmetral.volume(), self.ellipsoid.volume(), places=10)
        self.assertAlmostEqual(float(symmetral.exact.center @ u), 0.0, places=12)


class TestBodySpecs(unittest.TestCase):

    def test_round_trip(self):
        E = Ellipsoid(np.diag([1.0, 1.5, 2.0]), shift=[0.1, 0.0, 0.0])
        again = body_from_spec(json.loads(json.dumps(body_to_spec(E))))
        V = sphere_grid(3, 1).nodes
        np.testing.assert_allclose(again.support(V), E.support(V), atol=1e-12)

    def test_affine_spec(self):
        spec = {"kind": "affine", "matrix": [[1, 0.3, 0], [0, 1, 0], [0, 0, 1]],
                "shift": [0.1, 0, 0], "body": {"kind": "lq_ball", "q": 4, "scale": 1}}
        K = body_from_spec(spec)
        self.assertIsInstance(K, AffineImage)
        self.assertAlmostEqual(K.volume(), LqBall(4.0).volume(), places=10)

    def test_errors_name_the_field(self):
        with self.assertRaises(SpecError) as ctx:
            body_from_spec({"kind": "ellipsoid"})
        self.assertIn("matrix", str(ctx.exception))
        with self.assertRaises(SpecError) as ctx:
            body_from_spec({"kind": "ellipsoid", "matrix": [[1]], "colour": "red"})
        self.assertIn("colour", str(ctx.exception))
        with self.assertRaises(SpecError) as ctx:
            body_from_spec({"kind": "sphere"})
        self.assertIn("kind", str(ctx.exception))

    def test_load_body(self):
        with tempfile.TemporaryDirectory() as tmp:
            good = os.path.join(tmp, "cube.json")
            with open(good, "w") as handle:
                json.dump({"kind": "polytope", "vertices": CUBE.tolist()}, handle)
            K, spec = load_body(good)
            self.assertAlmostEqual(K.volume(), 8.0, places=10)
            self.assertEqual(spec["kind"], "polytope")
            bad = os.path.join(tmp, "bad.json")
            with open(bad, "w") as handle:
                handle.write("{not json")
            with self.assertRaises(SpecError):
                load_body(bad)


if __name__ == "__main__":
    unittest.main()
