"""
The L_p projection rolodex in R^3.

A fiber is a line E = span{e} in u^perp. In the plane E^perp = span{w, u}
every vector x = y w + s u has the wedge functional
    Phi(y, s) = |P_{E^x, p} K| = (int |<J x, v>|^p h_K^(1-p) dS(K, v))^(1/p),
with J the quarter turn J(w) = u, J(u) = -w. Phi is a norm, its unit ball
is L_{E,p}(K), and the sections of L_{E,p}(K) at height s, averaged over
the fibers, recover vol(Pi_p^* K).
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, List, Optional, Sequence

import numpy as np

from bodies import Body, SurfaceMeasure, as_rows
from lp_ops import check_p, polar_pi_volume
from numgrid import (BISECT_TOL, DomainError, bisect_many, gauss_legendre,
                     golden_min_many, orthonormal_frame, rolodex_constant)
from shadow import ShadowSystem, shadow_body

logger = logging.getLogger(__name__)

CIRCLE_SAMPLES = 720


@dataclass(frozen=True, eq=False)
class Fiber:
    """Frame {e, w, u} of the fiber E = span{e(alpha)} in u^perp."""
    u: np.ndarray
    alpha: float
    e: np.ndarray
    w: np.ndarray

    @classmethod
    def at(cls, u, alpha: float) -> "Fiber":
        u = np.asarray(u, dtype=float)
        if u.shape != (3,):
            raise DomainError(f"The rolodex lives in R^3, got a direction in R^{u.shape[0]}")
        u = u / np.linalg.norm(u)
        F, _ = orthonormal_frame(u)
        e = np.cos(alpha) * F[:, 0] + np.sin(alpha) * F[:, 1]
        w = -np.sin(alpha) * F[:, 0] + np.cos(alpha) * F[:, 1]
        return cls(u, float(alpha), e, w)

    def coordinates(self, X: np.ndarray):
        """(y, s) of the projection onto E^perp."""
        X = np.atleast_2d(X)
        return X @ self.w, X @ self.u

    def J(self, X: np.ndarray) -> np.ndarray:
        y, s = self.coordinates(X)
        return np.outer(y, self.u) - np.outer(s, self.w)


def fibers(u, count: int) -> List[Fiber]:
    """count fibers at the midpoint angles (k + 1/2) pi / count."""
    return [Fiber.at(u, (k + 0.5) * np.pi / count) for k in range(count)]


@dataclass(frozen=True, eq=False)
class WedgeForm:
    """Phi(y, s) = (sum_i m_i |y a_i - s b_i|^p)^(1/p) for one fiber and one measure."""
    along_u: np.ndarray
    along_w: np.ndarray
    masses: np.ndarray
    p: float
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def of(cls, measure: SurfaceMeasure, fiber: Fiber, p: float) -> "WedgeForm":
        return cls(measure.normals @ fiber.u, measure.normals @ fiber.w,
                   measure.lp_masses(p), p)

    def __call__(self, y, s) -> np.ndarray:
        y, s = np.broadcast_arrays(np.asarray(y, dtype=float), np.asarray(s, dtype=float))
        forms = np.abs(y[..., None] * self.along_u - s[..., None] * self.along_w)
        return (forms ** self.p @ self.masses) ** (1.0 / self.p)

    def _extremes(self):
        if "extremes" not in self._cache:
            omega = np.pi * np.arange(CIRCLE_SAMPLES) / CIRCLE_SAMPLES
            values = self(np.cos(omega), np.sin(omega))
            self._cache["extremes"] = (float(values.min()), float(values.max()))
        return self._cache["extremes"]

    @property
    def inradius(self) -> float:
        """Radius of a disk inside {Phi <= 1}."""
        return 0.999 / self._extremes()[1]

    @property
    def outradius(self) -> float:
        """Radius of a disk containing {Phi <= 1}."""
        return 1.001 / self._extremes()[0]

    @property
    def s_max(self) -> float:
        """Largest height s with a nonempty section: 1 / min_y Phi(y, 1)."""
        if "s_max" not in self._cache:
            reach = 1.25 * float(self(0.0, 1.0)) / self._extremes()[0]
            _, low = golden_min_many(lambda y: self(y, np.ones_like(y)),
                                     np.array([-reach]), np.array([reach]))
            self._cache["s_max"] = 1.0 / float(low[0])
        return self._cache["s_max"]

    def lengths(self, s, tol: float = BISECT_TOL) -> np.ndarray:
        """Length of {y : Phi(y, s) <= 1} for each s; the set is an interval."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        reach = np.full(len(s), 1.25 * self.outradius)
        centre, low = golden_min_many(lambda y: self(y, s), -reach, reach)
        out = np.zeros(len(s))
        live = low < 1.0
        if np.any(live):
            s_live = s[live]

            def excess(y):
                return self(y, s_live) - 1.0

            right = bisect_many(excess, centre[live], reach[live], tol=tol)
            left = bisect_many(excess, -reach[live], centre[live], tol=tol)
            out[live] = right - left
        return out

    def section_integral(self, scount: int, tol: float = BISECT_TOL) -> float:
        """
        int |s| length(s) ds. Sections are even in s, and s = s_max sin(tau)
        absorbs the square-root decay of the length at the top.
        """
        s_max = self.s_max
        rule = gauss_legendre(scount, 0.0, np.pi / 2.0)
        s = s_max * np.sin(rule.nodes)
        integrand = s * self.lengths(s, tol) * s_max * np.cos(rule.nodes)
        return 2.0 * rule.integrate(integrand)


@dataclass(frozen=True, eq=False)
class SectionProfile:
    fiber: Fiber
    s: np.ndarray
    lengths: np.ndarray
    t: float

    def concavity_violation(self) -> float:
        """Largest midpoint failure of concavity where the sections are nonempty."""
        live = self.lengths > 0
        L = self.lengths
        middle = live[1:-1] & live[:-2] & live[2:]
        if not np.any(middle):
            return 0.0
        gaps = 0.5 * (L[:-2] + L[2:]) - L[1:-1]
        return float(max(gaps[middle].max(), 0.0))


def _measure(K: Body, grid, measure: Optional[SurfaceMeasure]) -> SurfaceMeasure:
    return measure or K.surface_measure(grid)


def pe_wedge(K: Body, F: Fiber, x, p: float, grid=None,
             measure: Optional[SurfaceMeasure] = None):
    """
    |P_{E^x, p} K| for x in E^perp (x is projected onto E^perp first).
    It is 1-homogeneous in x and zero only at x = 0.
    """
    check_p(p)
    X, single = as_rows(x)
    measure = _measure(K, grid, measure)
    JX = F.J(X)
    values = (np.abs(JX @ measure.normals.T) ** p @ measure.lp_masses(p)) ** (1.0 / p)
    return float(values[0]) if single else values


def section_length(K: Body, F: Fiber, s: float, p: float, tol: float = BISECT_TOL,
                   grid=None, measure: Optional[SurfaceMeasure] = None) -> float:
    """Length of the section of L_{E,p}(K) at height s along u."""
    check_p(p)
    form = WedgeForm.of(_measure(K, grid, measure), F, p)
    return float(form.lengths([s], tol)[0])


def lep_boundary(K: Body, F: Fiber, p: float, m: int = 64, grid=None,
                 measure: Optional[SurfaceMeasure] = None) -> np.ndarray:
    """m boundary points d_j / Phi(d_j) of L_{E,p}(K), counterclockwise in (w, u)."""
    angles = 2.0 * np.pi * np.arange(m) / m
    D = np.outer(np.cos(angles), F.w) + np.outer(np.sin(angles), F.u)
    return D / pe_wedge(K, F, D, p, grid=grid, measure=measure)[:, None]


def rolodex_volume(K: Body, u, p: float, angles: int = 32, scount: int = 64,
                   grid=None, tol: float = BISECT_TOL,
                   pmap: Callable[..., Iterable] = map) -> float:
    """
    c~_{3,p} times the fiber average of int |s| |L_{E,p,u,s}(K)| ds.
    """
    check_p(p)
    measure = _measure(K, grid, None)

    def fiber_integral(fiber: Fiber) -> float:
        return WedgeForm.of(measure, fiber, p).section_integral(scount, tol)

    integrals = list(pmap(fiber_integral, fibers(u, angles)))
    return rolodex_constant(3, p) * float(np.mean(integrals))


def _member_form(S: ShadowSystem, F: Fiber, t: float, p: float, grid) -> WedgeForm:
    return WedgeForm.of(shadow_body(S, t).surface_measure(grid), F, p)


def m_functional(S: ShadowSystem, F: Fiber, t: float, p: float, scount: int = 64,
                 grid=None, tol: float = BISECT_TOL) -> float:
    """
    M(t) = (int |s| |L_{E,p,u,s}(K_t)| ds)^(-1/q) with q = 1 + 1/p.

    Raises:
        DomainError: If the section integral vanishes
    """
    check_p(p)
    integral = _member_form(S, F, t, p, grid).section_integral(scount, tol)
    if integral <= 0:
        raise DomainError(f"Section integral vanished at t={t}")
    return integral ** (-1.0 / (1.0 + 1.0 / p))


def section_profile(S: ShadowSystem, F: Fiber, t: float, p: float, scount: int = 64,
                    grid=None, tol: float = BISECT_TOL) -> SectionProfile:
    form = _member_form(S, F, t, p, grid)
    s = np.linspace(-form.s_max, form.s_max, scount)
    return SectionProfile(F, s, form.lengths(s, tol), float(t))


@dataclass(frozen=True)
class MBounds:
    lower: float
    upper: float
    values: np.ndarray


def m_bounds(S: ShadowSystem, F: Fiber, p: float, ts: Sequence[float], scount: int = 64,
             grid=None) -> MBounds:
    """
    Uniform bounds on M(t): L_{E,p}(K_t) lies between disks of radii r and R,
    so ((4/3) R^3)^(-1/q) <= M(t) <= ((4/3) r^3)^(-1/q).
    """
    q = 1.0 + 1.0 / p
    lows, highs, values = [], [], []
    for t in ts:
        form = _member_form(S, F, t, p, grid)
        lows.append((4.0 / 3.0 * form.outradius ** 3) ** (-1.0 / q))
        highs.append((4.0 / 3.0 * form.inradius ** 3) ** (-1.0 / q))
        values.append(form.section_integral(scount) ** (-1.0 / q))
    return MBounds(min(lows), max(highs), np.array(values))


@dataclass(frozen=True, eq=False)
class ConvexityReport:
    ts: np.ndarray
    values: np.ndarray
    violation: float
    evenness: float
    monotone_violation: float


def convexity_check(S: ShadowSystem, F: Fiber, p: float, ts: Sequence[float],
                    scount: int = 64, grid=None) -> ConvexityReport:
    """
    Midpoint convexity of t -> M(t) over consecutive triples, its evenness,
    and the largest decrease on [0, 1] (an even convex function cannot decrease there).
    """
    ts = np.sort(np.asarray(ts, dtype=float))
    values = np.array([m_functional(S, F, t, p, scount, grid) for t in ts])
    violation = 0.0
    for k in range(1, len(ts) - 1):
        alpha = (ts[k] - ts[k - 1]) / (ts[k + 1] - ts[k - 1])
        chord = (1.0 - alpha) * values[k - 1] + alpha * values[k + 1]
        violation = max(violation, values[k] - chord)
    evenness = 0.0
    for k, t in enumerate(ts):
        mirror = np.flatnonzero(np.abs(ts + t) <= 1e-12)
        if len(mirror):
            evenness = max(evenness, abs(values[k] - values[mirror[0]]))
    right = ts >= 0
    drops = values[right][:-1] - values[right][1:]
    monotone = float(max(drops.max(), 0.0)) if len(drops) else 0.0
    return ConvexityReport(ts, values, float(violation), float(evenness), monotone)


@dataclass(frozen=True)
class HarmonicGap:
    section: float
    wedge: float


def harmonic_gap(S: ShadowSystem, F: Fiber, p: float, s0: float, s1: float, alpha: float,
                 t0: float, t1: float, y0: float, y1: float, grid=None,
                 tol: float = BISECT_TOL) -> HarmonicGap:
    """
    Gaps (positive means the inequality fails) of the harmonic combination
    lam = alpha s0 / (alpha s0 + (1-alpha) s1), s_a = (1-lam) s0 + lam s1,
    t_a = (1-alpha) t0 + alpha t1, on the section level
        s_a^w |L_{s_a}(K_{t_a})| >= (s0^w |L_{s0}(K_t0)|)^(1-lam) (s1^w |L_{s1}(K_t1)|)^lam
    with w = (p-1)/p, and on the wedge level
        Phi_{t_a}(y_lam, s_a)^p <= (1-lam)(s0/s_a)^(1-p) Phi_t0(y0,s0)^p + lam (s1/s_a)^(1-p) Phi_t1(y1,s1)^p.
    """
    if s0 <= 0 or s1 <= 0 or not 0 < alpha < 1:
        raise DomainError("Harmonic samples need s0, s1 > 0 and alpha in (0, 1)")
    lam = alpha * s0 / (alpha * s0 + (1.0 - alpha) * s1)
    s_a = (1.0 - lam) * s0 + lam * s1
    t_a = (1.0 - alpha) * t0 + alpha * t1
    y_lam = (1.0 - lam) * y0 + lam * y1
    form0, form1, form_a = (_member_form(S, F, t, p, grid) for t in (t0, t1, t_a))

    w = (p - 1.0) / p
    lhs = s_a ** w * form_a.lengths([s_a], tol)[0]
    rhs = (s0 ** w * form0.lengths([s0], tol)[0]) ** (1.0 - lam) \
        * (s1 ** w * form1.lengths([s1], tol)[0]) ** lam

    top = float(form_a(y_lam, s_a)) ** p
    bound = (1.0 - lam) * (s0 / s_a) ** (1.0 - p) * float(form0(y0, s0)) ** p \
        + lam * (s1 / s_a) ** (1.0 - p) * float(form1(y1, s1)) ** p
    return HarmonicGap(section=float(rhs - lhs), wedge=float((top - bound) / bound))


def harmonic_inequality_check(S: ShadowSystem, F: Fiber, p: float, samples: int = 200,
                              rng: Optional[np.random.Generator] = None,
                              grid=None) -> HarmonicGap:
    """Largest gaps of harmonic_gap over seeded random samples."""
    check_p(p)
    rng = rng or np.random.default_rng(0)
    section, wedge = -np.inf, -np.inf
    for _ in range(samples):
        t0, t1 = rng.uniform(-1.0, 1.0, size=2)
        alpha = rng.uniform(0.05, 0.95)
        form0, form1 = _member_form(S, F, t0, p, grid), _member_form(S, F, t1, p, grid)
        s0 = rng.uniform(0.02, 1.0) * form0.s_max
        s1 = rng.uniform(0.02, 1.0) * form1.s_max
        y0 = rng.uniform(-1.0, 1.0) * form0.outradius
        y1 = rng.uniform(-1.0, 1.0) * form1.outradius
        gap = harmonic_gap(S, F, p, s0, s1, alpha, t0, t1, y0, y1, grid)
        section, wedge = max(section, gap.section), max(wedge, gap.wedge)
    logger.info("harmonic check: %d samples, section gap %.3e, wedge gap %.3e",
                samples, section, wedge)
    return HarmonicGap(float(section), float(wedge))


@dataclass(frozen=True, eq=False)
class MonotonicitySweep:
    ts: np.ndarray
    volumes: np.ndarray
    polar_volumes: np.ndarray

    @property
    def max_increase(self) -> float:
        """Largest rise of vol(Pi_p^* K_t) between consecutive t."""
        rises = np.diff(self.polar_volumes)
        return float(max(rises.max(), 0.0)) if len(rises) else 0.0


def monotonicity_sweep(S: ShadowSystem, p: float, ts: Sequence[float], grid,
                       pmap: Callable[..., Iterable] = map) -> MonotonicitySweep:
    """vol(K_t) and vol(Pi_p^* K_t) along increasing t in [0, 1]."""
    check_p(p)
    ts = np.sort(np.asarray(ts, dtype=float))
    if ts[0] < 0 or ts[-1] > 1:
        raise DomainError("The monotonicity sweep runs over t in [0, 1]")

    def evaluate(t):
        member = shadow_body(S, t)
        return member.volume(), polar_pi_volume(member, p, grid)

    rows = list(pmap(evaluate, ts))
    return MonotonicitySweep(ts, np.array([r[0] for r in rows]), np.array([r[1] for r in rows]))
