"""
Convex body representations and the basic Brunn-Minkowski operations.

Three kinds of bodies carry the lab:
- Polytope: vertices and grouped facets from Qhull; its surface area
  measure is a finite set of atoms, so every L_p integral over it is exact.
- Ellipsoid: A * (unit ball) + shift with A symmetric positive definite;
  support, gauge and graph functions are closed form.
- GraphBody: the region between g_t <= s <= f_t over the projection of a
  body onto u^perp. It is how shadow systems and Steiner symmetrals exist.

LqBall and AffineImage supply smooth bodies that are not ellipsoids.
All evaluators are vectorized over rows of an (m, n) array; the module-level
functions also accept a single vector and then return a float.
"""

import functools
import json
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy import linalg, special
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import ConvexHull, HalfspaceIntersection, QhullError, cKDTree

from numgrid import (DEFAULT_LEVEL, DomainError, SphereQuadrature, bisect_many,
                     gauss_legendre, golden_min_many, orthonormal_frame,
                     sphere_grid, unit_ball_volume)

logger = logging.getLogger(__name__)

OFFSET_FLOOR = 1e-14
INSIDE_TOL = 1e-9
FACET_MERGE_TOL = 1e-8


class RankError(DomainError):
    """Raised for degenerate point sets and singular maps."""


class SpecError(DomainError):
    """Raised for malformed body specification files."""


def as_rows(v) -> Tuple[np.ndarray, bool]:
    a = np.asarray(v, dtype=float)
    return np.atleast_2d(a), a.ndim == 1


def _unit(u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    norm = np.linalg.norm(u)
    if norm == 0:
        raise DomainError("Direction vector must be nonzero")
    return u / norm


def _safe_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num, dtype=float)
    np.divide(num, den, out=out, where=np.abs(den) > 1e-14)
    return out


def spd_sqrt(M: np.ndarray) -> np.ndarray:
    """Symmetric square root of a positive semidefinite matrix."""
    w, V = linalg.eigh(0.5 * (M + M.T))
    root = (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T
    return 0.5 * (root + root.T)


@dataclass(frozen=True, eq=False)
class SurfaceMeasure:
    """
    Discrete surface area measure S(K, .).

    Each atom carries a unit normal, a positive mass and one boundary point
    with that normal. Polytopes give true atoms (facets); smooth bodies give
    a boundary quadrature.
    """
    normals: np.ndarray
    masses: np.ndarray
    points: np.ndarray
    atomic: bool = False

    @property
    def offsets(self) -> np.ndarray:
        """Support values <x, nu> at the atoms."""
        return np.einsum("ij,ij->i", self.points, self.normals)

    @property
    def total_mass(self) -> float:
        return float(self.masses.sum())

    def first_moment(self) -> np.ndarray:
        return self.masses @ self.normals

    def lp_masses(self, p: float) -> np.ndarray:
        """Masses of the L_p surface area measure h^(1-p) dS."""
        offsets = self.offsets
        if np.any(offsets <= OFFSET_FLOOR):
            raise DomainError(
                f"Support value {offsets.min():.3e} at an atom is not positive; "
                "the origin is not interior")
        if p == 1:
            return self.masses.copy()
        return self.masses * offsets ** (1.0 - p)


class Body(ABC):
    """A convex body in R^n containing the origin in its interior."""

    dim: int

    @abstractmethod
    def gauge(self, X: np.ndarray) -> np.ndarray:
        """Minkowski functional; equals the support function of the polar."""

    @abstractmethod
    def support(self, V: np.ndarray) -> np.ndarray:
        pass

    @abstractmethod
    def support_point(self, V: np.ndarray) -> np.ndarray:
        pass

    @abstractmethod
    def normal(self, X: np.ndarray) -> np.ndarray:
        """Outer unit normals at boundary points."""

    @abstractmethod
    def volume(self) -> float:
        pass

    def radial(self, V: np.ndarray) -> np.ndarray:
        return 1.0 / self.gauge(V)

    def level(self, X: np.ndarray) -> np.ndarray:
        """A convex function with {level <= 1} = K and level = 1 on the boundary."""
        return self.gauge(X)

    def surface_measure(self, grid: Optional[SphereQuadrature] = None) -> SurfaceMeasure:
        return radial_measure(self, grid or sphere_grid(self.dim, DEFAULT_LEVEL))

    def graph(self, u: np.ndarray) -> "GraphFunctions":
        return RootGraph(self, u)

    @functools.cached_property
    def outer_radius(self) -> float:
        """An upper bound for max |x| over the body."""
        nodes = sphere_grid(self.dim, 2).nodes
        return 1.25 * float(self.support(nodes).max())


def radial_measure(body: Body, grid: SphereQuadrature) -> SurfaceMeasure:
    """
    Boundary quadrature from the radial parameterization x = rho(v) v:
    dH = rho^(n-1) / <nu, v> dv.
    """
    V = grid.nodes
    rho = body.radial(V)
    X = rho[:, None] * V
    nu = body.normal(X)
    cos = np.einsum("ij,ij->i", nu, V)
    if np.any(cos <= 0):
        raise DomainError("Boundary normal faces the origin; origin is not interior")
    masses = grid.weights * rho ** (body.dim - 1) / cos
    return SurfaceMeasure(nu, masses, X, atomic=False)


# ---------------------------------------------------------------------------
# Polytopes

@dataclass(frozen=True, eq=False)
class Facet:
    normal: np.ndarray
    area: float
    offset: float
    vertices: Tuple[int, ...]


class Polytope(Body):
    """V-representation with grouped facets; build it with hull()."""

    def __init__(self, vertices: np.ndarray, facets: List[Facet],
                 edges: np.ndarray):
        self.vertices = vertices
        self.facets = facets
        self.edges = edges
        self.dim = vertices.shape[1]
        self._normals = np.array([f.normal for f in facets])
        self._areas = np.array([f.area for f in facets])
        self._offsets = np.array([f.offset for f in facets])

    def __repr__(self) -> str:
        return f"Polytope({len(self.vertices)} vertices, {len(self.facets)} facets)"

    def _ratios(self, X: np.ndarray) -> np.ndarray:
        if np.any(self._offsets <= OFFSET_FLOOR):
            raise DomainError("The origin is not interior to the polytope")
        return (X @ self._normals.T) / self._offsets

    def gauge(self, X):
        return self._ratios(np.atleast_2d(X)).max(axis=1)

    def support(self, V):
        return (np.atleast_2d(V) @ self.vertices.T).max(axis=1)

    def support_point(self, V, with_ties: bool = False):
        scores = np.atleast_2d(V) @ self.vertices.T
        best = scores.argmax(axis=1)
        points = self.vertices[best]
        if not with_ties:
            return points
        top2 = np.sort(scores, axis=1)[:, -2:] if scores.shape[1] > 1 else None
        scale = 1.0 + np.abs(scores.max(axis=1))
        ties = np.zeros(len(best), dtype=bool) if top2 is None else \
            (top2[:, 1] - top2[:, 0]) <= 1e-12 * scale
        return points, ties

    def normal(self, X):
        # lowest facet index wins ties
        return self._normals[self._ratios(np.atleast_2d(X)).argmax(axis=1)]

    def surface_measure(self, grid=None):
        points = np.array([self.vertices[list(f.vertices)].mean(axis=0)
                           for f in self.facets])
        return SurfaceMeasure(self._normals, self._areas, points, atomic=True)

    def volume(self):
        return float(np.dot(self._offsets, self._areas) / self.dim)

    def graph(self, u):
        return PolytopeGraph(self, u)

    @functools.cached_property
    def outer_radius(self):
        return float(np.linalg.norm(self.vertices, axis=1).max())


def _simplex_measure(corners: np.ndarray) -> np.ndarray:
    if corners.shape[2] == 2:
        return np.linalg.norm(corners[:, 1] - corners[:, 0], axis=1)
    cross = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
    return 0.5 * np.linalg.norm(cross, axis=1)


def hull(points) -> Polytope:
    """
    Convex hull in R^2 or R^3 with coplanar Qhull simplices merged into facets.

    Raises:
        RankError: If the points do not affinely span the space
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] not in (2, 3):
        raise DomainError(f"hull expects an (m, 2) or (m, 3) array, got shape {pts.shape}")
    n = pts.shape[1]
    centered = pts - pts.mean(axis=0)
    scale = max(float(np.abs(centered).max()), 1e-300)
    if len(pts) <= n or np.linalg.matrix_rank(centered / scale, tol=1e-10) < n:
        raise RankError(f"{len(pts)} points do not span R^{n}")
    try:
        qh = ConvexHull(pts)
    except QhullError as err:
        raise RankError(f"Qhull rejected the point set: {err}") from err

    normals = qh.equations[:, :n]
    offsets = -qh.equations[:, n]
    keys = np.column_stack([normals, offsets / scale])
    pairs = cKDTree(keys).query_pairs(FACET_MERGE_TOL, output_type="ndarray")
    count = len(keys)
    adjacency = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])),
                           shape=(count, count))
    n_facets, labels = connected_components(adjacency, directed=False)

    position = {int(idx): k for k, idx in enumerate(qh.vertices)}
    vertices = pts[qh.vertices]
    measures = _simplex_measure(pts[qh.simplices])
    facets = []
    for label in range(n_facets):
        members = np.flatnonzero(labels == label)
        normal = normals[members].mean(axis=0)
        normal /= np.linalg.norm(normal)
        corner_ids = sorted({position[int(i)] for i in qh.simplices[members].ravel()})
        facets.append(Facet(normal=normal, area=float(measures[members].sum()),
                            offset=float(offsets[members].mean()),
                            vertices=tuple(corner_ids)))

    edges = _true_edges(qh.simplices, labels, position) if n == 3 else \
        np.array([[position[int(a)], position[int(b)]] for a, b in qh.simplices])
    logger.debug("hull: %d points -> %d vertices, %d facets", len(pts),
                 len(vertices), len(facets))
    return Polytope(vertices, facets, edges)


def _true_edges(simplices: np.ndarray, labels: np.ndarray, position: dict) -> np.ndarray:
    owners = {}
    for simplex, label in zip(simplices, labels):
        for a, b in ((0, 1), (1, 2), (2, 0)):
            key = tuple(sorted((position[int(simplex[a])], position[int(simplex[b])])))
            owners.setdefault(key, set()).add(int(label))
    return np.array(sorted(k for k, facet_ids in owners.items() if len(facet_ids) > 1),
                    dtype=int).reshape(-1, 2)


def sampled_body(grid: SphereQuadrature, values: np.ndarray) -> Tuple[Polytope, float]:
    """
    Wulff shape {x : <x, v_i> <= h_i} of sampled support values.

    Returns:
        (polytope, repair) where repair is the largest relative amount by
        which the polytope's support falls below a sample; it is zero when
        the samples come from a convex body.
    """
    h = np.asarray(values, dtype=float)
    if np.any(h <= 0):
        raise DomainError("Sampled support values must be positive")
    halfspaces = np.column_stack([grid.nodes, -h])
    hs = HalfspaceIntersection(halfspaces, np.zeros(grid.n))
    body = hull(hs.intersections)
    repair = float(np.max((h - body.support(grid.nodes)) / h))
    if repair > 1e-6:
        logger.warning("sampled support repaired by %.3e (relative)", repair)
    return body, max(repair, 0.0)


# ---------------------------------------------------------------------------
# Smooth bodies

class Ellipsoid(Body):
    """shift + A * (unit ball) with A symmetric positive definite."""

    def __init__(self, matrix, shift=None):
        A = np.atleast_2d(np.asarray(matrix, dtype=float))
        A = 0.5 * (A + A.T)
        if A.shape[0] != A.shape[1]:
            raise DomainError(f"Ellipsoid matrix must be square, got {A.shape}")
        eig = linalg.eigvalsh(A)
        if eig.min() <= 0:
            raise DomainError(f"Ellipsoid matrix is not positive definite (eigenvalue {eig.min():.3e})")
        self.dim = A.shape[0]
        self.A = A
        self.A_inv = linalg.inv(A)
        self.Q = self.A_inv @ self.A_inv
        self.center = np.zeros(self.dim) if shift is None else np.asarray(shift, dtype=float)
        self._b = self.A_inv @ self.center

    def __repr__(self) -> str:
        return f"Ellipsoid(A={self.A.tolist()}, shift={self.center.tolist()})"

    def gauge(self, X):
        bb = float(self._b @ self._b)
        if bb >= 1:
            raise DomainError("The origin is not interior to the ellipsoid")
        a = np.atleast_2d(X) @ self.A_inv.T
        ab = a @ self._b
        aa = np.einsum("ij,ij->i", a, a)
        return (-ab + np.sqrt(ab ** 2 + aa * (1.0 - bb))) / (1.0 - bb)

    def support(self, V):
        V = np.atleast_2d(V)
        return V @ self.center + np.linalg.norm(V @ self.A, axis=1)

    def support_point(self, V):
        AV = np.atleast_2d(V) @ self.A
        return self.center + (AV @ self.A) / np.linalg.norm(AV, axis=1)[:, None]

    def normal(self, X):
        G = (np.atleast_2d(X) - self.center) @ self.Q
        return G / np.linalg.norm(G, axis=1)[:, None]

    def surface_measure(self, grid=None):
        """Gauss-map atoms: dS = det(A)^2 |A theta|^-(n+1) dtheta."""
        grid = grid or sphere_grid(self.dim, DEFAULT_LEVEL)
        theta = grid.nodes
        stretch = np.linalg.norm(theta @ self.A, axis=1)
        masses = grid.weights * linalg.det(self.A) ** 2 / stretch ** (self.dim + 1)
        return SurfaceMeasure(theta, masses, self.support_point(theta), atomic=False)

    def volume(self):
        return unit_ball_volume(self.dim) * float(linalg.det(self.A))

    def graph(self, u):
        return EllipsoidGraph(self, u)

    @functools.cached_property
    def outer_radius(self):
        return float(np.linalg.norm(self.center) + linalg.eigvalsh(self.A).max())


class LqBall(Body):
    """scale * {x : ||x||_q <= 1}."""

    def __init__(self, q: float, scale: float = 1.0, dim: int = 3):
        if q <= 1:
            raise DomainError(f"l_q balls need q > 1, got {q}")
        if scale <= 0:
            raise DomainError(f"scale must be positive, got {scale}")
        self.q, self.scale, self.dim = float(q), float(scale), int(dim)
        self.q_dual = self.q / (self.q - 1.0)

    def __repr__(self) -> str:
        return f"LqBall(q={self.q}, scale={self.scale}, dim={self.dim})"

    def gauge(self, X):
        return np.linalg.norm(np.atleast_2d(X), ord=self.q, axis=1) / self.scale

    def support(self, V):
        return self.scale * np.linalg.norm(np.atleast_2d(V), ord=self.q_dual, axis=1)

    def support_point(self, V):
        V = np.atleast_2d(V)
        r = self.q_dual
        norm = np.linalg.norm(V, ord=r, axis=1)[:, None]
        return self.scale * np.sign(V) * (np.abs(V) / norm) ** (r - 1.0)

    def normal(self, X):
        X = np.atleast_2d(X)
        G = np.sign(X) * np.abs(X) ** (self.q - 1.0)
        return G / np.linalg.norm(G, axis=1)[:, None]

    def volume(self):
        q, n = self.q, self.dim
        return float(self.scale ** n * (2.0 * special.gamma(1.0 + 1.0 / q)) ** n
                     / special.gamma(1.0 + n / q))


class AffineImage(Body):
    """matrix * body + shift for an invertible matrix."""

    def __init__(self, body: Body, matrix, shift=None):
        L = np.asarray(matrix, dtype=float)
        det = float(linalg.det(L))
        if abs(det) < 1e-12:
            raise RankError("Affine image needs an invertible matrix")
        self.body, self.L, self.det = body, L, det
        self.L_inv = linalg.inv(L)
        self.dim = body.dim
        self.shift = np.zeros(self.dim) if shift is None else np.asarray(shift, dtype=float)

    def __repr__(self) -> str:
        return f"AffineImage({self.body!r}, L={self.L.tolist()}, shift={self.shift.tolist()})"

    def level(self, Y: np.ndarray) -> np.ndarray:
        return self.body.gauge((Y - self.shift) @ self.L_inv.T)

    def gauge(self, X):
        X = np.atleast_2d(X)
        if not np.any(self.shift):
            return self.level(X)
        if self.level(np.zeros((1, self.dim)))[0] >= 1:
            raise DomainError("The origin is not interior to the affine image")
        norms = np.linalg.norm(X, axis=1)
        out = np.zeros(len(X))
        live = norms > 0
        if np.any(live):
            D = X[live] / norms[live, None]
            reach = bisect_many(lambda lam: self.level(lam[:, None] * D) - 1.0,
                                np.zeros(len(D)), np.full(len(D), 1.01 * self.outer_radius),
                                tol=1e-13)
            out[live] = norms[live] / reach
        return out

    def support(self, V):
        V = np.atleast_2d(V)
        return V @ self.shift + self.body.support(V @ self.L)

    def support_point(self, V):
        return self.shift + self.body.support_point(np.atleast_2d(V) @ self.L) @ self.L.T

    def normal(self, X):
        Z = (np.atleast_2d(X) - self.shift) @ self.L_inv.T
        G = self.body.normal(Z) @ self.L_inv
        return G / np.linalg.norm(G, axis=1)[:, None]

    def volume(self):
        return abs(self.det) * self.body.volume()

    @functools.cached_property
    def outer_radius(self):
        return float(np.linalg.norm(self.shift)
                     + np.linalg.norm(self.L, 2) * self.body.outer_radius)


# ---------------------------------------------------------------------------
# Graph functions over u^perp

class ProjectedBody:
    """The projection K'_u of a body onto u^perp, in frame coordinates."""

    def __init__(self, body: Body, frame: np.ndarray, u: np.ndarray):
        self.body, self.frame, self.u = body, frame, u
        self.dim = frame.shape[1]

    def support(self, W):
        return self.body.support(np.atleast_2d(W) @ self.frame.T)

    def gauge(self, Y):
        Y = np.atleast_2d(Y)
        if self.dim == 1:
            up = self.support(np.array([[1.0]]))[0]
            down = self.support(np.array([[-1.0]]))[0]
            y = Y[:, 0]
            return np.where(y >= 0, y / up, -y / down)
        P = Y @ self.frame.T
        reach = self.body.outer_radius * self.body.gauge(P) * 1.01 + 1e-300
        _, low = golden_min_many(lambda s: self.body.gauge(P + s[:, None] * self.u),
                                 -reach, reach)
        return low

    def radial(self, W):
        return 1.0 / self.gauge(W)


class GraphFunctions(ABC):
    """
    Upper and lower graph functions f, g of a body over its projection
    onto u^perp. Base points are given in the frame coordinates of u^perp:
    x = F x' + s u.
    """

    def __init__(self, body: Body, u):
        self.body = body
        self.u = _unit(u)
        self.frame, self.rotation = orthonormal_frame(self.u)
        self.dim = body.dim

    @property
    @abstractmethod
    def base(self):
        pass

    @abstractmethod
    def heights(self, Xb: np.ndarray, strict: bool = True) -> Tuple[np.ndarray, np.ndarray]:
        """(f, g) at base points; outside points raise, or give NaN when not strict."""

    @abstractmethod
    def gradients(self, Xb: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        pass

    def sheared(self, t: float) -> Optional[Body]:
        """An exact representation of the shadow body K_t, when one exists."""
        return None

    def upper(self, Xb):
        return self.heights(np.atleast_2d(Xb))[0]

    def lower(self, Xb):
        return self.heights(np.atleast_2d(Xb))[1]

    def midpoint(self, Xb, strict: bool = True):
        f, g = self.heights(np.atleast_2d(Xb), strict=strict)
        return 0.5 * (f + g)

    def lift(self, Xb: np.ndarray, s: np.ndarray) -> np.ndarray:
        return np.atleast_2d(Xb) @ self.frame.T + np.asarray(s)[:, None] * self.u

    def project(self, X: np.ndarray) -> np.ndarray:
        return np.atleast_2d(X) @ self.frame

    def base_radial(self, E: np.ndarray) -> np.ndarray:
        return 1.0 / self.base.gauge(E)

    @staticmethod
    def _outside(strict: bool, mask: np.ndarray, f: np.ndarray, g: np.ndarray):
        if np.any(mask):
            if strict:
                raise DomainError(f"{int(mask.sum())} base point(s) lie outside the projection")
            f[mask] = np.nan
            g[mask] = np.nan
        return f, g


class PolytopeGraph(GraphFunctions):
    """Piecewise-linear graph functions from the facet inequalities."""

    def __init__(self, body: Polytope, u):
        super().__init__(body, u)
        nu_u = body._normals @ self.u
        self._up = np.flatnonzero(nu_u > 1e-12)
        self._down = np.flatnonzero(nu_u < -1e-12)
        self._wall = np.flatnonzero(np.abs(nu_u) <= 1e-12)
        self._nu_u = nu_u
        self._nb = body._normals @ self.frame

    @functools.cached_property
    def base(self):
        projected = self.body.vertices @ self.frame
        if self.dim == 3:
            return hull(projected)
        return ProjectedBody(self.body, self.frame, self.u)

    def _levels(self, Xb, ids):
        return (self.body._offsets[ids] - Xb @ self._nb[ids].T) / self._nu_u[ids]

    def heights(self, Xb, strict=True):
        Xb = np.atleast_2d(Xb)
        f = self._levels(Xb, self._up).min(axis=1)
        g = self._levels(Xb, self._down).max(axis=1)
        scale = INSIDE_TOL * (1.0 + self.body.outer_radius)
        outside = f < g - scale
        if len(self._wall):
            slack = Xb @ self._nb[self._wall].T - self.body._offsets[self._wall]
            outside |= slack.max(axis=1) > scale
        pinch = (f < g) & ~outside
        mid = 0.5 * (f + g)
        f = np.where(pinch, mid, f)
        g = np.where(pinch, mid, g)
        return self._outside(strict, outside, f, g)

    def gradients(self, Xb):
        Xb = np.atleast_2d(Xb)
        top = self._up[self._levels(Xb, self._up).argmin(axis=1)]
        bottom = self._down[self._levels(Xb, self._down).argmax(axis=1)]
        grad_f = -self._nb[top] / self._nu_u[top, None]
        grad_g = -self._nb[bottom] / self._nu_u[bottom, None]
        return grad_f, grad_g

    def overlay_points(self) -> np.ndarray:
        """Projected vertices plus crossings of projected edges."""
        projected = self.body.vertices @ self.frame
        if self.dim != 3 or len(self.body.edges) < 2:
            return projected
        p = projected[self.body.edges[:, 0]]
        r = projected[self.body.edges[:, 1]] - p
        i, j = np.triu_indices(len(p), k=1)
        cross = r[i, 0] * r[j, 1] - r[i, 1] * r[j, 0]
        dq = p[j] - p[i]
        ok = np.abs(cross) > 1e-12
        lam = np.where(ok, (dq[:, 0] * r[j, 1] - dq[:, 1] * r[j, 0]) / np.where(ok, cross, 1.0), -1.0)
        mu = np.where(ok, (dq[:, 0] * r[i, 1] - dq[:, 1] * r[i, 0]) / np.where(ok, cross, 1.0), -1.0)
        eps = 1e-12
        hit = ok & (lam > eps) & (lam < 1 - eps) & (mu > eps) & (mu < 1 - eps)
        crossings = p[i[hit]] + lam[hit, None] * r[i[hit]]
        return np.vstack([projected, crossings])

    def sheared(self, t):
        Xb = self.overlay_points()
        f, g = self.heights(Xb, strict=False)
        keep = ~np.isnan(f)
        Xb, f, g = Xb[keep], f[keep], g[keep]
        f_t, g_t = shear_heights(f, g, t)
        return hull(np.vstack([self.lift(Xb, f_t), self.lift(Xb, g_t)]))


class EllipsoidGraph(GraphFunctions):
    """Closed-form graph functions from the quadratic (x-c)^T Q (x-c) = 1."""

    def __init__(self, body: Ellipsoid, u):
        super().__init__(body, u)
        Q, F = body.Q, self.frame
        self._quu = float(self.u @ Q @ self.u)
        self._beta = F.T @ Q @ self.u
        self._G = F.T @ Q @ F
        self._cb = F.T @ body.center
        self._cu = float(body.center @ self.u)

    @functools.cached_property
    def base(self):
        F, A = self.frame, self.body.A
        return Ellipsoid(spd_sqrt(F.T @ A @ A @ F), self._cb)

    def _parts(self, Xb):
        z = np.atleast_2d(Xb) - self._cb
        b = z @ self._beta
        zz = np.einsum("ij,jk,ik->i", z, self._G, z)
        disc = b ** 2 - self._quu * (zz - 1.0)
        return z, b, disc

    def heights(self, Xb, strict=True):
        _, b, disc = self._parts(Xb)
        outside = disc < -INSIDE_TOL
        root = np.sqrt(np.clip(disc, 0.0, None))
        f = self._cu + (-b + root) / self._quu
        g = self._cu + (-b - root) / self._quu
        return self._outside(strict, outside, f, g)

    def gradients(self, Xb):
        z, b, disc = self._parts(Xb)
        grad_disc = 2.0 * b[:, None] * self._beta - 2.0 * self._quu * (z @ self._G)
        with np.errstate(divide="ignore", invalid="ignore"):
            grad_root = grad_disc / (2.0 * np.sqrt(np.clip(disc, 0.0, None)))[:, None]
        grad_f = (-self._beta + grad_root) / self._quu
        grad_g = (-self._beta - grad_root) / self._quu
        return grad_f, grad_g

    def sheared(self, t):
        body, u, F = self.body, self.u, self.frame
        slope = F @ self._beta / self._quu
        M = np.eye(self.dim) - (t - 1.0) * np.outer(u, slope)
        center = body.center + (t - 1.0) * self._cu * u
        return Ellipsoid(spd_sqrt(M @ body.A @ body.A @ M.T), center)


class RootGraph(GraphFunctions):
    """Graph functions of any body by root finding along lines parallel to u."""

    @functools.cached_property
    def base(self):
        return ProjectedBody(self.body, self.frame, self.u)

    def heights(self, Xb, strict=True):
        Xb = np.atleast_2d(Xb)
        P = self.lift(Xb, np.zeros(len(Xb)))
        R = self.body.outer_radius

        def line(pts):
            return lambda s: self.body.level(pts + s[:, None] * self.u)

        s_min, g_min = golden_min_many(line(P), np.full(len(P), -R), np.full(len(P), R))
        outside = g_min > 1.0 + INSIDE_TOL
        f = s_min.copy()
        g = s_min.copy()
        live = ~outside & (g_min < 1.0)
        if np.any(live):
            level = line(P[live])
            f[live] = bisect_many(lambda s: level(s) - 1.0, s_min[live],
                                  np.full(int(live.sum()), R), tol=1e-13)
            g[live] = bisect_many(lambda s: level(s) - 1.0, np.full(int(live.sum()), -R),
                                  s_min[live], tol=1e-13)
        return self._outside(strict, outside, f, g)

    def gradients(self, Xb):
        Xb = np.atleast_2d(Xb)
        f, g = self.heights(Xb)
        n_top = self.body.normal(self.lift(Xb, f))
        n_bot = self.body.normal(self.lift(Xb, g))
        with np.errstate(divide="ignore", invalid="ignore"):
            grad_f = -(n_top @ self.frame) / (n_top @ self.u)[:, None]
            grad_g = -(n_bot @ self.frame) / (n_bot @ self.u)[:, None]
        return grad_f, grad_g


class ShadowGraph(GraphFunctions):
    """Graph functions of a graph body read off in its own direction."""

    def __init__(self, member: "GraphBody"):
        super().__init__(member, member.u)
        self.member = member

    @property
    def base(self):
        return self.member.fibers.base

    def heights(self, Xb, strict=True):
        return self.member.heights(Xb, strict=strict)

    def gradients(self, Xb):
        return self.member.gradients(Xb)


def shear_heights(f, g, t: float):
    """f_t = (t/2)(f+g) + (f-g)/2 and g_t = (t/2)(f+g) - (f-g)/2."""
    mean = 0.5 * t * (f + g)
    half = 0.5 * (f - g)
    return mean + half, mean - half


# ---------------------------------------------------------------------------
# Graph bodies

@dataclass(frozen=True, eq=False)
class BaseGrid:
    """Polar quadrature over the base K'_u in frame coordinates."""
    points: np.ndarray
    weights: np.ndarray


def base_grid(graph: GraphFunctions, level: int = DEFAULT_LEVEL) -> BaseGrid:
    """x' = r rho_b(e) e with Gauss-Legendre radii and the circle (or +-1) rule."""
    d = graph.dim - 1
    circle = sphere_grid(d, level)
    radii = gauss_legendre(4 * 2 ** level, 0.0, 1.0)
    rho = graph.base_radial(circle.nodes)
    points = (radii.nodes[:, None, None] * (rho[:, None] * circle.nodes)[None, :, :])
    weights = (radii.weights[:, None] * radii.nodes[:, None] ** (d - 1)
               * (circle.weights * rho ** d)[None, :])
    return BaseGrid(points.reshape(-1, d), weights.ravel())


class GraphBody(Body):
    """
    K_t = {(x', s) : g_t(x') <= s <= f_t(x')} over the base of a body K.

    t = 1 is K itself, t = 0 its Steiner symmetral and t = -1 its reflection.
    When K is a polytope or an ellipsoid, K_t is also kept in that exact form
    and every evaluator delegates to it. With pushforward=True a smooth K_t
    still takes its surface measure from K's boundary quadrature carried
    along the shear, which keeps the measure exactly linear in t.
    """

    def __init__(self, graph: GraphFunctions, t: float = 1.0,
                 base_level: int = DEFAULT_LEVEL, pushforward: bool = False):
        if isinstance(graph, ShadowGraph):
            t = graph.member.t * t
            graph = graph.member.fibers
        if abs(t) > 1.0 + 1e-12:
            raise DomainError(f"Shadow parameter must lie in [-1, 1], got {t}")
        self.fibers = graph
        self.t = float(t)
        self.source = graph.body
        self.u = graph.u
        self.dim = graph.dim
        self.base_level = base_level
        self.exact = graph.sheared(self.t)
        self.pushforward = pushforward and not isinstance(self.source, Polytope)

    def __repr__(self) -> str:
        return f"GraphBody(t={self.t}, u={self.u.tolist()}, source={self.source!r})"

    def heights(self, Xb, strict=True):
        f, g = self.fibers.heights(Xb, strict=strict)
        return shear_heights(f, g, self.t)

    def gradients(self, Xb):
        grad_f, grad_g = self.fibers.gradients(Xb)
        return shear_heights(grad_f, grad_g, self.t)

    def graph(self, u):
        if self.exact is not None:
            return self.exact.graph(u)
        if float(np.dot(_unit(u), self.u)) > 1.0 - 1e-12:
            return ShadowGraph(self)
        return RootGraph(self, u)

    def _offset_of(self, Y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        Yb = self.fibers.project(Y)
        f, g = self.fibers.heights(Yb, strict=False)
        return 0.5 * (f + g), np.isnan(f)

    def gauge(self, X):
        if self.exact is not None:
            return self.exact.gauge(X)
        X = np.atleast_2d(X)
        norms = np.linalg.norm(X, axis=1)
        out = np.zeros(len(X))
        live = norms > 0
        if not np.any(live):
            return out
        D = X[live] / norms[live, None]

        def excess(lam):
            Y = lam[:, None] * D
            a, off_base = self._offset_of(Y)
            level = self.source.level(Y - (self.t - 1.0) * np.nan_to_num(a)[:, None] * self.u)
            return np.where(off_base, 1.0, level - 1.0)

        reach = bisect_many(excess, np.zeros(len(D)), np.full(len(D), 3.0 * self.source.outer_radius),
                            tol=1e-12)
        out[live] = norms[live] / reach
        return out

    def support(self, V):
        if self.exact is not None:
            return self.exact.support(V)
        V = np.atleast_2d(V)
        return np.einsum("ij,ij->i", V, self._support_search(V))

    def support_point(self, V):
        if self.exact is not None:
            return self.exact.support_point(V)
        return self._support_search(np.atleast_2d(V))

    def _support_search(self, V: np.ndarray) -> np.ndarray:
        """Compass search over the base for the concave objective <x', v'> + v_u f_t or g_t."""
        graph = self.fibers
        vb, vu = V @ graph.frame, V @ self.u
        d = self.dim - 1

        def objective(Xb, vb_rows, vu_rows):
            f_t, g_t = self.heights(Xb, strict=False)
            height = np.where(vu_rows >= 0, f_t, g_t)
            value = np.einsum("ij,ij->i", Xb, vb_rows) + vu_rows * height
            return np.where(np.isnan(value), -np.inf, value), height

        coarse = base_grid(graph, 1).points
        f_c, g_c = self.heights(coarse, strict=False)
        scores = vb @ coarse.T + np.where(vu[:, None] >= 0, f_c[None, :], g_c[None, :]) * vu[:, None]
        current = coarse[np.where(np.isnan(scores), -np.inf, scores).argmax(axis=1)]
        best, _ = objective(current, vb, vu)
        # K's own support point shears onto a near-maximizer for t close to 1
        seed = graph.project(self.source.support_point(V))
        seeded, _ = objective(seed, vb, vu)
        better = seeded > best
        current = np.where(better[:, None], seed, current)
        best = np.where(better, seeded, best)
        step = np.full(len(V), 0.5 * float(graph.base.support(np.eye(d)).max()) / 4.0)
        moves = np.vstack([np.eye(d), -np.eye(d)])
        if d == 2:
            diag = np.array([[1, 1], [1, -1], [-1, 1], [-1, -1]]) / np.sqrt(2.0)
            moves = np.vstack([moves, diag])
        floor = 1e-12 * (1.0 + self.source.outer_radius)
        for _ in range(400):
            if np.all(step < floor):
                break
            trial = current[:, None, :] + step[:, None, None] * moves[None, :, :]
            flat = trial.reshape(-1, d)
            rep = np.repeat(np.arange(len(V)), len(moves))
            values, _ = objective(flat, vb[rep], vu[rep])
            values = values.reshape(len(V), len(moves))
            pick = values.argmax(axis=1)
            gain = values[np.arange(len(V)), pick] > best
            current = np.where(gain[:, None], trial[np.arange(len(V)), pick], current)
            best = np.where(gain, values[np.arange(len(V)), pick], best)
            step = np.where(gain, step, 0.5 * step)
        f_t, g_t = self.heights(current, strict=False)
        height = np.where(vu >= 0, f_t, g_t)
        points = graph.lift(current, height)
        # directions in u^perp peak on the rim, where the shear moves points by t * a = t * s
        flat = np.abs(vu) <= 1e-12 * np.linalg.norm(V, axis=1)
        if np.any(flat):
            rim = self.source.support_point(vb[flat] @ graph.frame.T)
            points[flat] = graph.lift(graph.project(rim), self.t * (rim @ self.u))
        return points

    def normal(self, X):
        if self.exact is not None:
            return self.exact.normal(X)
        X = np.atleast_2d(X)
        Xb = self.fibers.project(X)
        f_t, g_t = self.heights(Xb, strict=False)
        grad_f, grad_g = self.gradients(Xb)
        s = X @ self.u
        top = np.abs(s - f_t) <= np.abs(s - g_t)
        F = self.fibers.frame
        up = -grad_f @ F.T + self.u
        down = grad_g @ F.T - self.u
        G = np.where(top[:, None], up, down)
        return G / np.linalg.norm(G, axis=1)[:, None]

    def surface_measure(self, grid=None):
        if self.exact is not None and not self.pushforward:
            return self.exact.surface_measure(grid)
        return self._pushforward_measure(grid or sphere_grid(self.dim, DEFAULT_LEVEL))

    def _pushforward_measure(self, grid: SphereQuadrature) -> SurfaceMeasure:
        """
        Carry the boundary quadrature of K along x -> x + (t-1) a(x') u.
        The shear has unit Jacobian, so the area element scales with
        |nu - (t-1) nu_u grad a| and that vector is the new normal direction.
        """
        source = self.source.surface_measure(grid)
        graph, u, F = self.fibers, self.u, self.fibers.frame
        X, nu = source.points, source.normals
        Xb = graph.project(X)
        f, g = graph.heights(Xb, strict=False)
        s = X @ u
        f = np.where(np.isnan(f), s, f)
        g = np.where(np.isnan(g), s, g)
        n_top = self.source.normal(graph.lift(Xb, f))
        n_bot = self.source.normal(graph.lift(Xb, g))
        nu_u = nu @ u
        # nu_u * grad a, using grad f = -n'/n_u at the upper point and likewise below
        slope = -0.5 * (_safe_ratio(nu_u, n_top @ u)[:, None] * (n_top @ F)
                        + _safe_ratio(nu_u, n_bot @ u)[:, None] * (n_bot @ F))
        tilted = nu - (self.t - 1.0) * (slope @ F.T)
        stretch = np.linalg.norm(tilted, axis=1)
        points = X + (self.t - 1.0) * (0.5 * (f + g))[:, None] * u
        return SurfaceMeasure(tilted / stretch[:, None], source.masses * stretch,
                              points, atomic=False)

    def volume(self):
        if self.exact is not None:
            return self.exact.volume()
        # f_t - g_t = f - g, so this is the same number for every t
        grid = base_grid(self.fibers, self.base_level)
        f, g = self.fibers.heights(grid.points, strict=False)
        return float(np.dot(grid.weights, np.nan_to_num(f - g)))

    @functools.cached_property
    def outer_radius(self):
        if self.exact is not None:
            return self.exact.outer_radius
        return 3.0 * self.source.outer_radius


# ---------------------------------------------------------------------------
# Operations

def _evaluate(method: Callable, v):
    X, single = as_rows(v)
    out = method(X)
    return float(out[0]) if single else out


def support(K: Body, v):
    """h_K(v) = max over K of <x, v>."""
    return _evaluate(K.support, v)


def radial(K: Body, v):
    """rho_K(v) = max{lambda >= 0 : lambda v in K}."""
    return _evaluate(K.radial, v)


def polar_support(K: Body, v):
    """h_{K*}(v) = 1 / rho_K(v)."""
    return _evaluate(K.gauge, v)


def volume(K: Body, grid: Optional[SphereQuadrature] = None) -> float:
    """
    Volume of K. Without a grid the body's own formula is used (pyramid sum,
    det A, Fubini); with a grid it is (1/n) * integral of rho^n.
    """
    if grid is None:
        return K.volume()
    return grid.integrate(K.radial(grid.nodes) ** K.dim) / K.dim


def surface_measure(K: Body, grid: Optional[SphereQuadrature] = None) -> SurfaceMeasure:
    return K.surface_measure(grid)


def sp_integral(K: Body, phi: Optional[Callable[[np.ndarray], np.ndarray]], p: float,
                grid: Optional[SphereQuadrature] = None,
                measure: Optional[SurfaceMeasure] = None) -> float:
    """
    Integral of phi(theta) h_K(theta)^(1-p) dS(K, theta). phi=None means 1.
    """
    if p < 1:
        raise DomainError(f"p must be at least 1, got {p}")
    measure = measure or K.surface_measure(grid)
    weights = measure.lp_masses(p)
    if phi is None:
        return float(weights.sum())
    return float(np.dot(phi(measure.normals), weights))


def graph_functions(K: Body, u) -> GraphFunctions:
    return K.graph(_unit(u))


def steiner(K: Body, u, base_level: int = DEFAULT_LEVEL) -> GraphBody:
    """Steiner symmetral: chords parallel to u recentred on u^perp."""
    return GraphBody(graph_functions(K, u), 0.0, base_level=base_level)


def apply_linear(K: Body, A) -> Body:
    A = np.asarray(A, dtype=float)
    if A.shape != (K.dim, K.dim) or abs(linalg.det(A)) < 1e-12:
        raise RankError(f"Linear map must be an invertible {K.dim}x{K.dim} matrix")
    if isinstance(K, GraphBody) and K.exact is not None:
        K = K.exact
    if isinstance(K, Polytope):
        return hull(K.vertices @ A.T)
    if isinstance(K, Ellipsoid):
        return Ellipsoid(spd_sqrt(A @ K.A @ K.A @ A.T), A @ K.center)
    if isinstance(K, AffineImage):
        return AffineImage(K.body, A @ K.L, A @ K.shift)
    return AffineImage(K, A)


def reflect(K: Body, u) -> Body:
    """R_u K for the reflection in u^perp."""
    u = _unit(u)
    return apply_linear(K, np.eye(K.dim) - 2.0 * np.outer(u, u))


def sup_distance(K: Body, L: Body, grid: SphereQuadrature) -> float:
    """max over grid nodes of |h_K - h_L|, a proxy for the Hausdorff distance."""
    return float(np.abs(K.support(grid.nodes) - L.support(grid.nodes)).max())


def diameter(K: Body, grid: SphereQuadrature) -> float:
    V = grid.nodes
    return float((K.support(V) + K.support(-V)).max())


# ---------------------------------------------------------------------------
# Body specification files

_FIELDS = {
    "polytope": ({"kind", "vertices"}, set()),
    "ellipsoid": ({"kind", "matrix"}, {"shift"}),
    "lq_ball": ({"kind", "q", "scale"}, {"dim"}),
    "affine": ({"kind", "matrix", "body"}, {"shift"}),
}


def body_from_spec(spec: dict) -> Body:
    """Build a body from its JSON object; unknown or missing fields are rejected."""
    if not isinstance(spec, dict) or "kind" not in spec:
        raise SpecError("Body spec must be an object with a 'kind' field")
    kind = spec["kind"]
    if kind not in _FIELDS:
        raise SpecError(f"Unknown body kind '{kind}' in field 'kind'")
    required, optional = _FIELDS[kind]
    for key in spec:
        if key not in required | optional:
            raise SpecError(f"Unknown field '{key}' for kind '{kind}'")
    missing = sorted(required - set(spec))
    if missing:
        raise SpecError(f"Missing field '{missing[0]}' for kind '{kind}'")
    try:
        if kind == "polytope":
            return hull(np.asarray(spec["vertices"], dtype=float))
        if kind == "ellipsoid":
            return Ellipsoid(spec["matrix"], spec.get("shift"))
        if kind == "lq_ball":
            return LqBall(float(spec["q"]), float(spec["scale"]), int(spec.get("dim", 3)))
        inner = body_from_spec(spec["body"])
        matrix = np.asarray(spec["matrix"], dtype=float)
        shift = np.zeros(inner.dim) if spec.get("shift") is None else np.asarray(spec["shift"], float)
        image = apply_linear(inner, matrix)
        if isinstance(image, Polytope):
            return hull(image.vertices + shift)
        if isinstance(image, Ellipsoid):
            return Ellipsoid(image.A, image.center + shift)
        return AffineImage(image.body, image.L, image.shift + shift)
    except SpecError:
        raise
    except (TypeError, ValueError) as err:
        raise SpecError(f"Bad value in '{kind}' spec: {err}") from err


def body_to_spec(K: Body, grid: Optional[SphereQuadrature] = None) -> dict:
    """
    JSON object for a body. Bodies without a file form are written as the
    polytope of their support sampled on the grid.
    """
    if isinstance(K, GraphBody) and K.exact is not None:
        K = K.exact
    if isinstance(K, Polytope):
        return {"kind": "polytope", "vertices": K.vertices.tolist()}
    if isinstance(K, Ellipsoid):
        spec = {"kind": "ellipsoid", "matrix": K.A.tolist()}
        if np.any(K.center):
            spec["shift"] = K.center.tolist()
        return spec
    if isinstance(K, LqBall):
        return {"kind": "lq_ball", "q": K.q, "scale": K.scale, "dim": K.dim}
    if isinstance(K, AffineImage) and not isinstance(K.body, GraphBody):
        return {"kind": "affine", "matrix": K.L.tolist(), "shift": K.shift.tolist(),
                "body": body_to_spec(K.body, grid)}
    grid = grid or sphere_grid(K.dim, DEFAULT_LEVEL)
    sampled, _ = sampled_body(grid, K.support(grid.nodes))
    return body_to_spec(sampled)


def load_body(path) -> Tuple[Body, dict]:
    """Read a body file; returns the body and the parsed spec for report echoes."""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            spec = json.load(handle)
    except json.JSONDecodeError as err:
        raise SpecError(f"{path}: not valid JSON ({err})") from err
    return body_from_spec(spec), spec
