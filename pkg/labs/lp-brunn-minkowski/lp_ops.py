"""
The L_p operators: the L_p projection body Pi_p, its polar, the L_p
centroid body Gamma_p and the composite Gamma_p Pi_p^*.

Support functions are evaluated through their 1-homogeneous formulas, so
they accept any nonzero vector, one per row.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Tuple, Union

import numpy as np

from bodies import Body, SurfaceMeasure, apply_linear, as_rows
from numgrid import DomainError, SphereQuadrature, lyz_constant, unit_ball_volume

logger = logging.getLogger(__name__)

P_MAX = 10.0
CHUNK = 512


def check_p(p: float) -> float:
    """
    Raises:
        DomainError: Unless 1 < p <= P_MAX
    """
    if not 1.0 < p <= P_MAX:
        raise DomainError(f"p must lie in (1, {P_MAX:g}], got {p}")
    return float(p)


def _cosine_transform(V: np.ndarray, normals: np.ndarray, weights: np.ndarray,
                      p: float) -> np.ndarray:
    """sum_i |<v, nu_i>|^p w_i for every row v, in chunks."""
    out = np.empty(len(V))
    for start in range(0, len(V), CHUNK):
        block = np.abs(V[start:start + CHUNK] @ normals.T) ** p
        out[start:start + CHUNK] = block @ weights
    return out


def pi_support(K: Body, p: float, v, grid: Optional[SphereQuadrature] = None,
               measure: Optional[SurfaceMeasure] = None):
    """
    Support function of Pi_p K:
    h(v)^p = integral |<v, theta>|^p h_K^(1-p) dS(K, theta) / (n w_n c_{n-2,p}).

    Args:
        K: Body with the origin in its interior
        p: Exponent in (1, P_MAX]
        v: One vector or an (m, n) array of vectors
        grid: Sphere rule for smooth bodies' surface measure
        measure: Precomputed surface measure of K (overrides grid)

    Returns:
        A float for a single vector, else an array of length m
    """
    check_p(p)
    X, single = as_rows(v)
    measure = measure or K.surface_measure(grid)
    n = K.dim
    scale = n * unit_ball_volume(n) * lyz_constant(n - 2, p)
    values = (_cosine_transform(X, measure.normals, measure.lp_masses(p), p) / scale) ** (1.0 / p)
    return float(values[0]) if single else values


def pi_polar_radial(K: Body, p: float, grid: SphereQuadrature,
                    measure: Optional[SurfaceMeasure] = None) -> np.ndarray:
    """rho_{Pi_p^* K} = 1 / h_{Pi_p K} at the grid nodes."""
    return 1.0 / pi_support(K, p, grid.nodes, grid=grid, measure=measure)


def polar_pi_volume(K: Body, p: float, grid: SphereQuadrature,
                    measure: Optional[SurfaceMeasure] = None) -> float:
    """vol(Pi_p^* K) = (1/n) sum_i w_i h_{Pi_p K}(v_i)^(-n)."""
    rho = pi_polar_radial(K, p, grid, measure)
    return grid.integrate(rho ** grid.n) / grid.n


def gamma_support(rho: Union[Callable[[np.ndarray], np.ndarray], np.ndarray], p: float,
                  v, grid: SphereQuadrature):
    """
    Support function of Gamma_p of the star body with radial function rho,
    in polar coordinates:
    h(v)^p = integral |<v, theta>|^p rho^(n+p) dtheta / ((n+p) c_{n,p} vol),
    with vol = (1/n) integral rho^n on the same grid.

    rho is either an evaluator on unit vectors or its values at grid.nodes.
    """
    check_p(p)
    X, single = as_rows(v)
    n = grid.n
    R = rho(grid.nodes) if callable(rho) else np.asarray(rho, dtype=float)
    if np.any(R <= 0):
        raise DomainError("Radial function must be positive on the grid")
    vol = grid.integrate(R ** n) / n
    weights = grid.weights * R ** (n + p)
    scale = (n + p) * lyz_constant(n, p) * vol
    values = (_cosine_transform(X, grid.nodes, weights, p) / scale) ** (1.0 / p)
    return float(values[0]) if single else values


@dataclass(frozen=True, eq=False)
class SampledSupport:
    """Support values of an operator output sampled on a sphere grid."""
    grid: SphereQuadrature
    values: np.ndarray
    provenance: str

    @property
    def min(self) -> float:
        return float(self.values.min())

    def subadditivity_violation(self, rng: np.random.Generator, samples: int = 200) -> float:
        """
        Largest relative excess of h(v_i + v_j) over h(v_i) + h(v_j) on random
        node pairs, with h(v_i + v_j) read at the node nearest to v_i + v_j.
        """
        nodes = self.grid.nodes
        i = rng.integers(0, len(nodes), size=samples)
        j = rng.integers(0, len(nodes), size=samples)
        total = nodes[i] + nodes[j]
        length = np.linalg.norm(total, axis=1)
        keep = length > 0.1
        if not np.any(keep):
            return 0.0
        i, j, total, length = i[keep], j[keep], total[keep], length[keep]
        k = (total / length[:, None] @ nodes.T).argmax(axis=1)
        sides = self.values[i] + self.values[j]
        return float(np.max((length * self.values[k] - sides) / sides))


def gamma_polar_pi(K: Body, p: float, grid: SphereQuadrature,
                   measure: Optional[SurfaceMeasure] = None) -> SampledSupport:
    """h_{Gamma_p Pi_p^* K} on the grid nodes."""
    rho = pi_polar_radial(K, p, grid, measure)
    values = gamma_support(rho, p, grid.nodes, grid)
    return SampledSupport(grid, values, provenance=f"gamma_polar_pi(p={p:g})")


def fixed_point_residual(K: Body, p: float, grid: SphereQuadrature,
                         measure: Optional[SurfaceMeasure] = None) -> Tuple[float, float]:
    """
    Minimax dilation factor and relative residual of Gamma_p Pi_p^* K = c K.

    Returns:
        (c_star, residual) with c_star the midpoint of the ratio range and
        residual its half-width over c_star
    """
    sampled = gamma_polar_pi(K, p, grid, measure)
    ratios = sampled.values / K.support(grid.nodes)
    hi, lo = float(ratios.max()), float(ratios.min())
    c_star = 0.5 * (hi + lo)
    return c_star, (hi - lo) / (2.0 * c_star)


@dataclass(frozen=True)
class CovarianceReport:
    pi_deviation: float
    gamma_deviation: float


def check_covariance(K: Body, A, p: float, grid: SphereQuadrature) -> CovarianceReport:
    """
    Relative sup deviations of h_{Pi_p(AK)}(v) = h_{Pi_p K}(A^-1 v) and
    h_{Gamma_p(AK)}(v) = h_{Gamma_p K}(A^T v) over the grid nodes.

    Raises:
        DomainError: If det A differs from 1
    """
    A = np.asarray(A, dtype=float)
    det = float(np.linalg.det(A))
    if abs(det - 1.0) > 1e-10:
        raise DomainError(f"Covariance check needs det A = 1, got {det:.12g}")
    V = grid.nodes
    image = apply_linear(K, A)

    pi_image = pi_support(image, p, V, grid=grid)
    pi_pulled = pi_support(K, p, V @ np.linalg.inv(A).T, grid=grid)
    pi_dev = float(np.max(np.abs(pi_image - pi_pulled) / pi_image))

    gamma_image = gamma_support(image.radial, p, V, grid)
    gamma_pulled = gamma_support(K.radial, p, V @ A, grid)
    gamma_dev = float(np.max(np.abs(gamma_image - gamma_pulled) / gamma_image))
    logger.debug("covariance: pi %.3e gamma %.3e", pi_dev, gamma_dev)
    return CovarianceReport(pi_dev, gamma_dev)


def positivity_bound(K: Body, p: float, grid: SphereQuadrature,
                     measure: Optional[SurfaceMeasure] = None) -> float:
    """
    A lower bound for h_{Pi_p K} over the grid: with R the largest support
    value carried by the measure, h^(1-p) >= R^(1-p) at every atom.
    """
    check_p(p)
    measure = measure or K.surface_measure(grid)
    n = K.dim
    scale = n * unit_ball_volume(n) * lyz_constant(n - 2, p)
    cosine = _cosine_transform(grid.nodes, measure.normals, measure.masses, p) / scale
    reach = float(measure.offsets.max())
    return float((reach ** (1.0 - p) * cosine.min()) ** (1.0 / p))
