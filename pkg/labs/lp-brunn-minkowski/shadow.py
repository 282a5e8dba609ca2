"""
Linear reflection shadow systems.

For a body K and a direction u, K_t moves every chord parallel to u so that
its midpoint a(x') is scaled by t: K_1 = K, K_0 = S_u K and K_-1 = R_u K.
Along t -> 1 the support function varies with speed
phi(theta) = a(x_K(theta)) <u, theta>.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from bodies import (Body, GraphBody, GraphFunctions, Polytope, PolytopeGraph, as_rows, base_grid,
                    graph_functions, reflect, sup_distance, volume)
from lp_ops import check_p, polar_pi_volume
from numgrid import DEFAULT_LEVEL, DomainError, SphereQuadrature

logger = logging.getLogger(__name__)

DEFAULT_STEPS = (1e-2, 5e-3, 2.5e-3)


@dataclass(frozen=True, eq=False)
class ShadowSystem:
    """
    A body, a direction and its graph functions.

    pushforward=True makes smooth members take their surface measure from
    K's quadrature carried along the shear instead of their own grid.
    """
    body: Body
    u: np.ndarray
    graph: GraphFunctions
    base_level: int = DEFAULT_LEVEL
    pushforward: bool = False
    _members: Dict[float, GraphBody] = field(default_factory=dict, repr=False)

    @classmethod
    def of(cls, K: Body, u, base_level: int = DEFAULT_LEVEL,
           pushforward: bool = False) -> "ShadowSystem":
        graph = graph_functions(K, u)
        return cls(K, graph.u, graph, base_level, pushforward)

    @property
    def base(self):
        return self.graph.base

    def member(self, t: float) -> GraphBody:
        """K_t, built once per parameter value."""
        if t not in self._members:
            self._members[t] = GraphBody(self.graph, t, base_level=self.base_level,
                                         pushforward=self.pushforward)
        return self._members[t]

    def midpoint(self, Xb: np.ndarray) -> np.ndarray:
        return self.graph.midpoint(Xb, strict=False)


@dataclass(frozen=True, eq=False)
class PerturbationTrace:
    ts: np.ndarray
    quotients: np.ndarray
    phi: np.ndarray
    deviations: np.ndarray

    @property
    def decreasing(self) -> bool:
        return bool(np.all(np.diff(self.deviations) < 0))


def shadow_body(S: ShadowSystem, t: float) -> GraphBody:
    """
    K_t with f_t = (t/2)(f+g) + (f-g)/2 and g_t = (t/2)(f+g) - (f-g)/2.

    Raises:
        DomainError: If |t| > 1
    """
    if abs(t) > 1.0:
        raise DomainError(f"Shadow parameter must lie in [-1, 1], got {t}")
    return S.member(float(t))


def perturbation_phi(S: ShadowSystem, theta):
    """
    phi(theta) = a(x_K(theta)) <u, theta>.

    Tied support maximizers (faces of a polytope) are logged and the first
    maximizer is used.
    """
    V, single = as_rows(theta)
    K = S.body
    if isinstance(K, Polytope):
        points, ties = K.support_point(V, with_ties=True)
        if np.any(ties):
            logger.warning("perturbation_phi: %d direction(s) with tied support points",
                           int(ties.sum()))
    else:
        points = K.support_point(V)
    a = np.nan_to_num(S.midpoint(S.graph.project(points)))
    values = a * (V @ S.u)
    return float(values[0]) if single else values


def check_admissible(S: ShadowSystem, ts: Sequence[float],
                     grid: SphereQuadrature) -> PerturbationTrace:
    """
    Sup deviation of the support difference quotients (h_{K_t} - h_K) / (t - 1)
    from phi over the grid, for each t < 1.
    """
    ts = np.asarray(ts, dtype=float)
    if np.any(ts >= 1.0):
        raise DomainError("Admissibility quotients need t < 1")
    V = grid.nodes
    h = S.body.support(V)
    phi = perturbation_phi(S, V)
    quotients = np.array([(shadow_body(S, t).support(V) - h) / (t - 1.0) for t in ts])
    deviations = np.abs(quotients - phi).max(axis=1)
    trace = PerturbationTrace(ts, quotients, phi, deviations)
    if not trace.decreasing:
        logger.warning("admissibility deviations are not decreasing: %s", deviations)
    return trace


def phi_surface_integral(S: ShadowSystem, grid: Optional[SphereQuadrature] = None) -> float:
    """Integral of phi against dS(K, .); each atom pairs with its own boundary point."""
    measure = S.body.surface_measure(grid)
    a = np.nan_to_num(S.midpoint(S.graph.project(measure.points)))
    return float(np.dot(a * (measure.normals @ S.u), measure.masses))


def first_variation_polar_pi(S: ShadowSystem, p: float, grid: SphereQuadrature,
                             steps: Sequence[float] = DEFAULT_STEPS) -> float:
    """
    Left derivative of t -> vol(Pi_p^* K_t) at t = 1, from the quotients
    (V(1) - V(1-h)) / h extrapolated to h = 0 by the interpolating polynomial.
    """
    check_p(p)
    steps = np.asarray(steps, dtype=float)
    if np.any(steps <= 0) or np.any(steps > 1):
        raise DomainError(f"Steps must lie in (0, 1], got {steps}")
    top = polar_pi_volume(shadow_body(S, 1.0), p, grid)
    quotients = np.array([(top - polar_pi_volume(shadow_body(S, 1.0 - h), p, grid)) / h
                          for h in steps])
    if len(steps) == 1:
        return float(quotients[0])
    coeffs = np.polyfit(steps, quotients, len(steps) - 1)
    return float(np.polyval(coeffs, 0.0))


def volume_invariance_check(S: ShadowSystem, ts: Sequence[float],
                            grid: Optional[SphereQuadrature] = None) -> float:
    """max over t of |vol(K_t) - vol(K_1)| / vol(K_1)."""
    reference = volume(shadow_body(S, 1.0), grid)
    return max(abs(volume(shadow_body(S, t), grid) - reference) / reference for t in ts)


def reflection_deviation(S: ShadowSystem, ts: Sequence[float],
                         grid: SphereQuadrature) -> float:
    """max over t of sup_distance(K_-t, R_u K_t)."""
    return max(sup_distance(shadow_body(S, -t), reflect(shadow_body(S, t), S.u), grid)
               for t in ts)


def hausdorff_lipschitz(S: ShadowSystem, ts: Sequence[float],
                        grid: SphereQuadrature) -> Tuple[np.ndarray, float]:
    """
    Observed sup_distance(K_t, K_t') / |t - t'| for consecutive t, and the
    bound max |a| over the base that no ratio can exceed.
    """
    ts = np.sort(np.asarray(ts, dtype=float))
    ratios = np.array([
        sup_distance(shadow_body(S, t0), shadow_body(S, t1), grid) / (t1 - t0)
        for t0, t1 in zip(ts[:-1], ts[1:])
    ])
    samples = np.vstack([base_grid(S.graph, S.base_level).points,
                         S.graph.project(S.body.support_point(grid.nodes))])
    if isinstance(S.graph, PolytopeGraph):
        samples = np.vstack([samples, S.graph.overlay_points()])
    bound = float(np.nanmax(np.abs(S.midpoint(samples))))
    return ratios, bound * (1.0 + 1e-9) + 1e-12


def concavity_violation(S: ShadowSystem, t: float, rng: np.random.Generator,
                        pairs: int = 200) -> float:
    """Largest midpoint failure of f_t concave and g_t convex over random base pairs."""
    member = shadow_body(S, t)
    points = base_grid(S.graph, 2).points
    i = rng.integers(0, len(points), size=pairs)
    j = rng.integers(0, len(points), size=pairs)
    x, y = points[i], points[j]
    f_x, g_x = member.heights(x, strict=False)
    f_y, g_y = member.heights(y, strict=False)
    f_m, g_m = member.heights(0.5 * (x + y), strict=False)
    upper = 0.5 * (f_x + f_y) - f_m
    lower = g_m - 0.5 * (g_x + g_y)
    return float(max(np.nanmax(upper), np.nanmax(lower), 0.0))


def volume_sweep(S: ShadowSystem, ts: Sequence[float]) -> List[float]:
    return [shadow_body(S, t).volume() for t in ts]
