"""
Special constants, quadrature rules and scalar root finding.

Every spherical integral in the lab goes through a SphereQuadrature: a
uniform angle grid on the circle, or a subdivided icosahedron on S^2 whose
nodes are normalized triangle centroids weighted by spherical triangle area.
The icosahedron is placed with vertices (0, ±1, ±phi) and cyclic
permutations, so the coordinate planes are mirror planes of every level.
"""

import functools
import logging
from dataclasses import dataclass
from typing import Callable, Tuple, Union

import numpy as np
from scipy import optimize, special
from scipy.spatial import ConvexHull

logger = logging.getLogger(__name__)

BISECT_TOL = 1e-10
DEFAULT_LEVEL = 3
GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


class DomainError(ValueError):
    """Raised when an argument lies outside the domain of an operation."""


class BracketError(DomainError):
    """Raised when a root-finding bracket has no sign change."""


def unit_ball_volume(r: float) -> float:
    """
    Volume of the unit ball in R^r, defined for real r through the Gamma function.

    Args:
        r: Nonnegative (possibly non-integer) dimension

    Returns:
        pi^(r/2) / Gamma(1 + r/2)

    Raises:
        DomainError: If r is negative
    """
    if r < 0:
        raise DomainError(f"Unit ball volume needs r >= 0, got {r}")
    return float(np.pi ** (r / 2.0) / special.gamma(1.0 + r / 2.0))


def lyz_constant(n: float, p: float) -> float:
    """
    Normalizing constant c_{n,p} = w_{n+p} / (w_2 w_n w_{p-1}).

    The first argument is also used with n-2, so any n >= 0 is accepted.
    """
    if p <= 1:
        raise DomainError(f"p must exceed 1, got {p}")
    if n < 0:
        raise DomainError(f"c_(n,p) needs n >= 0, got {n}")
    return unit_ball_volume(n + p) / (
        unit_ball_volume(2) * unit_ball_volume(n) * unit_ball_volume(p - 1)
    )


def bp_constant(n: int) -> float:
    """
    Fiber constant of the line-section integral formula: the integral of
    |cos phi|^(n-2) over the circle, 2 B((n-1)/2, 1/2).
    """
    if n < 3:
        raise DomainError(f"The fiber circle degenerates for n < 3, got n={n}")
    return float(2.0 * special.beta((n - 1) / 2.0, 0.5))


def rolodex_constant(n: int, p: float) -> float:
    """The constant turning the fiber section integrals into vol(Pi_p* K)."""
    if n < 3:
        raise DomainError(f"The rolodex needs n >= 3, got n={n}")
    area = n * unit_ball_volume(n)
    return area * (area * lyz_constant(n - 2, p)) ** (n / p) / bp_constant(n)


@dataclass(frozen=True, eq=False)
class Quadrature1D:
    """Nodes and positive weights of a rule on the interval (lo, hi)."""
    nodes: np.ndarray
    weights: np.ndarray
    interval: Tuple[float, float]

    def integrate(self, values: Union[np.ndarray, Callable]) -> float:
        if callable(values):
            values = values(self.nodes)
        return float(np.dot(self.weights, values))


def gauss_legendre(m: int, lo: float = -1.0, hi: float = 1.0) -> Quadrature1D:
    """m-point Gauss-Legendre rule mapped onto [lo, hi]."""
    if m < 1:
        raise DomainError(f"A quadrature rule needs at least one node, got {m}")
    if not hi > lo:
        raise DomainError(f"Empty interval ({lo}, {hi})")
    x, w = special.roots_legendre(m)
    half = (hi - lo) / 2.0
    return Quadrature1D(nodes=lo + half * (x + 1.0), weights=half * w,
                        interval=(float(lo), float(hi)))


def orthonormal_frame(u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Complete a unit vector u to a positively oriented orthonormal basis.

    Args:
        u: Direction in R^n (normalized here)

    Returns:
        (F, R) where F is n x (n-1) with columns spanning u^perp, and
        R = [F | u] is a rotation taking e_n to u
    """
    u = np.asarray(u, dtype=float)
    u = u / np.linalg.norm(u)
    n = u.shape[0]
    columns = []
    for i in np.argsort(np.abs(u), kind="stable"):
        e = np.zeros(n)
        e[i] = 1.0
        e -= np.dot(e, u) * u
        for c in columns:
            e -= np.dot(e, c) * c
        norm = np.linalg.norm(e)
        if norm > 1e-8:
            columns.append(e / norm)
        if len(columns) == n - 1:
            break
    F = np.column_stack(columns)
    R = np.column_stack([F, u])
    if np.linalg.det(R) < 0:
        F[:, 0] = -F[:, 0]
        R = np.column_stack([F, u])
    return F, R


@dataclass(frozen=True, eq=False)
class SphereQuadrature:
    """Nodes and weights on S^(n-1)."""
    n: int
    level: int
    nodes: np.ndarray
    weights: np.ndarray

    @property
    def size(self) -> int:
        return len(self.weights)

    def integrate(self, values: Union[np.ndarray, Callable]) -> float:
        if callable(values):
            values = values(self.nodes)
        return float(np.dot(self.weights, values))

    def rotated(self, R: np.ndarray) -> "SphereQuadrature":
        """The same rule carried by the orthogonal map R."""
        nodes = self.nodes @ np.asarray(R, dtype=float).T
        return SphereQuadrature(self.n, self.level, _frozen(nodes), self.weights)

    def aligned(self, u: np.ndarray) -> "SphereQuadrature":
        """Rotate so that e_n goes to u; the result is symmetric under R_u."""
        _, R = orthonormal_frame(u)
        return self.rotated(R)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.setflags(write=False)
    return a


def _normalize(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _icosahedron() -> np.ndarray:
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = []
    for a in (-1.0, 1.0):
        for b in (-phi, phi):
            verts += [(0.0, a, b), (a, b, 0.0), (b, 0.0, a)]
    verts = _normalize(np.array(verts))
    faces = ConvexHull(verts).simplices
    return verts[faces]


def _subdivide(tri: np.ndarray) -> np.ndarray:
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab, bc, ca = _normalize(a + b), _normalize(b + c), _normalize(c + a)
    return np.concatenate([
        np.stack([a, ab, ca], axis=1),
        np.stack([ab, b, bc], axis=1),
        np.stack([ca, bc, c], axis=1),
        np.stack([ab, bc, ca], axis=1),
    ])


def spherical_triangle_area(tri: np.ndarray) -> np.ndarray:
    """Solid angle of spherical triangles given as (T, 3, 3) unit vertices."""
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    triple = np.abs(np.einsum("ij,ij->i", a, np.cross(b, c)))
    denom = 1.0 + np.einsum("ij,ij->i", a, b) + np.einsum("ij,ij->i", b, c) \
        + np.einsum("ij,ij->i", c, a)
    return 2.0 * np.arctan2(triple, denom)


@functools.lru_cache(maxsize=None)
def sphere_grid(n: int, level: int = DEFAULT_LEVEL) -> SphereQuadrature:
    """
    Refinable quadrature on S^(n-1) for n in {1, 2, 3}.

    n=1 is the two-point "sphere" {-1, +1}, used for the base of planar
    graph bodies. n=2 is a uniform angle grid with 8 * 2^level nodes.
    n=3 is the icosahedron subdivided `level` times (20 * 4^level nodes).
    """
    if level < 0:
        raise DomainError(f"Grid level must be >= 0, got {level}")
    if n == 1:
        nodes, weights = np.array([[-1.0], [1.0]]), np.ones(2)
    elif n == 2:
        m = 8 * 2 ** level
        angles = 2.0 * np.pi * np.arange(m) / m
        nodes = np.column_stack([np.cos(angles), np.sin(angles)])
        weights = np.full(m, 2.0 * np.pi / m)
    elif n == 3:
        tri = _icosahedron()
        for _ in range(level):
            tri = _subdivide(tri)
        nodes = _normalize(tri.sum(axis=1))
        weights = spherical_triangle_area(tri)
    else:
        raise DomainError(f"Sphere grids exist for n in (1, 2, 3), got n={n}")
    logger.debug("sphere grid n=%d level=%d: %d nodes", n, level, len(weights))
    return SphereQuadrature(n, level, _frozen(nodes), _frozen(weights))


def bisect(f: Callable[[float], float], lo: float, hi: float,
           tol: float = BISECT_TOL) -> float:
    """
    Root of a scalar function bracketed by [lo, hi].

    Raises:
        BracketError: If f(lo) and f(hi) have the same strict sign
    """
    f_lo, f_hi = f(lo), f(hi)
    if f_lo == 0:
        return float(lo)
    if f_hi == 0:
        return float(hi)
    if np.sign(f_lo) == np.sign(f_hi):
        raise BracketError(f"No sign change on [{lo}, {hi}]: f={f_lo}, {f_hi}")
    return float(optimize.bisect(f, lo, hi, xtol=tol, maxiter=400))


def bisect_many(f: Callable[[np.ndarray], np.ndarray], lo: np.ndarray,
                hi: np.ndarray, tol: float = BISECT_TOL,
                max_iter: int = 200) -> np.ndarray:
    """
    Elementwise bisection: f maps an array of abscissae to an array of values,
    and every [lo_i, hi_i] must bracket a sign change of the i-th component.
    """
    lo = np.array(lo, dtype=float)
    hi = np.array(hi, dtype=float)
    sign_lo = np.sign(f(lo))
    sign_hi = np.sign(f(hi))
    if np.any(sign_lo * sign_hi > 0):
        bad = int(np.argmax(sign_lo * sign_hi > 0))
        raise BracketError(f"No sign change on [{lo.flat[bad]}, {hi.flat[bad]}]")
    for _ in range(max_iter):
        if np.all(hi - lo <= tol):
            break
        mid = 0.5 * (lo + hi)
        same = np.sign(f(mid)) * sign_lo > 0
        lo = np.where(same, mid, lo)
        hi = np.where(same, hi, mid)
    return 0.5 * (lo + hi)


def golden_min_many(f: Callable[[np.ndarray], np.ndarray], lo: np.ndarray,
                    hi: np.ndarray, max_iter: int = 90) -> Tuple[np.ndarray, np.ndarray]:
    """Elementwise golden-section search for the minimum of unimodal functions."""
    a = np.array(lo, dtype=float)
    b = np.array(hi, dtype=float)
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        left = fc <= fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        new_c = b - GOLDEN * (b - a)
        new_d = a + GOLDEN * (b - a)
        # one of the interior points survives; reuse its value
        c_next = np.where(left, new_c, d)
        d_next = np.where(left, c, new_d)
        fc_next = np.where(left, np.nan, fd)
        fd_next = np.where(left, fc, np.nan)
        need = np.where(left, c_next, d_next)
        fresh = f(need)
        fc = np.where(left, fresh, fc_next)
        fd = np.where(left, fd_next, fresh)
        c, d = c_next, d_next
    x = 0.5 * (a + b)
    return x, f(x)
