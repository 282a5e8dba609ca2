"""
Experiment harness: the rigidity chain, the equality characterization,
ellipsoid fitting, the fixed-point iteration and report files.

Every check becomes a CheckRecord with an explicit tolerance; a report
passes when all of its records do.
"""

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from bodies import (Body, Polytope, PolytopeGraph, base_grid, diameter, graph_functions,
                    hull, sampled_body, spd_sqrt)
from lp_ops import (SampledSupport, check_covariance, check_p, fixed_point_residual,
                    gamma_polar_pi, polar_pi_volume)
from numgrid import DEFAULT_LEVEL, DomainError, SphereQuadrature, sphere_grid
from rolodex import (convexity_check, fibers, harmonic_inequality_check,
                     monotonicity_sweep, rolodex_volume)
from shadow import (ShadowSystem, check_admissible, first_variation_polar_pi,
                    phi_surface_integral, shadow_body)

logger = logging.getLogger(__name__)

FIXED_POINT_TOL = 1e-2
ELLIPSOID_TOL = 1e-3
SWEEP_HEADER = ("t", "vol_Kt", "vol_polar_pi")


class FitError(DomainError):
    """Raised when no positive definite quadratic form fits the support."""


def default_directions(n: int = 3) -> List[np.ndarray]:
    """The 2n coordinate directions followed by the 2^n diagonals."""
    axes = [sign * np.eye(n)[i] for i in range(n) for sign in (1.0, -1.0)]
    corners = np.array(np.meshgrid(*([[1.0, -1.0]] * n), indexing="ij")).reshape(n, -1).T
    return axes + [c / np.sqrt(n) for c in corners]


def direction_label(u) -> str:
    return ",".join(f"{x:.4g}" for x in np.asarray(u, dtype=float))


def format_value(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.10g}"


def _plain(obj):
    """JSON-ready copy: arrays become lists and numpy scalars become Python numbers."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


@dataclass
class CheckRecord:
    name: str
    value: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.value <= self.tol)

    def to_dict(self) -> dict:
        return {"name": self.name, "value": float(self.value), "tol": float(self.tol),
                "pass": self.passed}


@dataclass
class Sweep:
    name: str
    header: Tuple[str, ...]
    rows: List[Tuple[float, ...]]


@dataclass
class ExperimentReport:
    experiment: str
    body: dict
    params: dict
    records: List[CheckRecord] = field(default_factory=list)
    sweeps: List[Sweep] = field(default_factory=list)
    artifacts: List[str] = field(default_factory=list)
    verdict: Optional[str] = None

    def check(self, name: str, value: float, tol: float) -> CheckRecord:
        record = CheckRecord(name, float(value), float(tol))
        self.records.append(record)
        logger.debug("%s = %.6g (tol %.1g) %s", name, value, tol,
                     "pass" if record.passed else "FAIL")
        return record

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.records)

    def to_dict(self) -> dict:
        payload = {
            "experiment": self.experiment,
            "body": _plain(self.body),
            "params": _plain(self.params),
            "records": [r.to_dict() for r in self.records],
            "artifacts": list(self.artifacts),
        }
        if self.verdict is not None:
            payload["verdict"] = self.verdict
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentReport":
        records = [CheckRecord(r["name"], r["value"], r["tol"]) for r in payload["records"]]
        return cls(payload["experiment"], payload["body"], payload["params"], records,
                   artifacts=list(payload["artifacts"]), verdict=payload.get("verdict"))


def write_report(report: ExperimentReport, path) -> List[Path]:
    """
    Write the report as JSON and each sweep as a sibling CSV
    <stem>-<sweep>.csv. The payload has no timestamps, so equal inputs give
    byte-identical files.

    Returns:
        Paths written, JSON first

    Raises:
        OSError: With the offending path in the message
    """
    path = Path(path)
    written = []
    target = path
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        report.artifacts = []
        csv_paths = []
        for sweep in report.sweeps:
            target = path.with_name(f"{path.stem}-{sweep.name}.csv")
            with open(target, "w", newline="", encoding="utf-8") as handle:
                writer = csv.writer(handle, lineterminator="\n")
                writer.writerow(sweep.header)
                for row in sweep.rows:
                    writer.writerow([format_value(x) for x in row])
            report.artifacts.append(target.name)
            csv_paths.append(target)
        target = path
        with open(path, "w", encoding="utf-8", newline="\n") as handle:
            handle.write(json.dumps(report.to_dict(), indent=2) + "\n")
        written = [path] + csv_paths
    except OSError as err:
        raise OSError(f"Could not write {target}: {err.strerror or err}") from err
    logger.info("report written to %s", path)
    return written


def read_report(path) -> ExperimentReport:
    """Parse a report written by write_report, sweeps included."""
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
        report = ExperimentReport.from_dict(payload)
        prefix = f"{path.stem}-"
        for name in report.artifacts:
            with open(path.with_name(name), newline="", encoding="utf-8") as handle:
                rows = list(csv.reader(handle))
            report.sweeps.append(Sweep(name[len(prefix):-len(".csv")], tuple(rows[0]),
                                       [tuple(float(x) for x in row) for row in rows[1:]]))
    except OSError as err:
        raise OSError(f"Could not read {path}: {err.strerror or err}") from err
    return report


# ---------------------------------------------------------------------------
# Checks

def petty_steiner_check(K: Body, u, p: float, grid: SphereQuadrature,
                        base_level: int = DEFAULT_LEVEL, tol: float = 1e-6) -> CheckRecord:
    """
    vol(Pi_p^* K) <= vol(Pi_p^* S_u K). The record value is the relative
    deficit (vol(Pi_p^* K) - vol(Pi_p^* S_u K)) / vol(Pi_p^* K).
    """
    S = ShadowSystem.of(K, u, base_level)
    aligned = grid.aligned(S.u)
    original = polar_pi_volume(shadow_body(S, 1.0), p, aligned)
    symmetral = polar_pi_volume(shadow_body(S, 0.0), p, aligned)
    return CheckRecord(f"steiner_deficit[{direction_label(u)}]",
                       (original - symmetral) / original, tol)


def midpoint_coplanarity(K: Body, u, level: int = DEFAULT_LEVEL,
                         grid: Optional[SphereQuadrature] = None) -> float:
    """
    Sup distance of the chord midpoints a(x') from their least-squares
    affine fit over the base, relative to diam(K).
    """
    graph = graph_functions(K, u)
    points = base_grid(graph, level).points
    if isinstance(graph, PolytopeGraph):
        points = np.vstack([points, graph.overlay_points()])
    mid = graph.midpoint(points, strict=False)
    keep = np.isfinite(mid)
    points, mid = points[keep], mid[keep]
    design = np.column_stack([points, np.ones(len(points))])
    coef, *_ = linalg.lstsq(design, mid)
    residual = float(np.abs(mid - design @ coef).max())
    return residual / diameter(K, grid or sphere_grid(K.dim, 2))


@dataclass(frozen=True, eq=False)
class EllipsoidFit:
    A: np.ndarray
    residual: float


def ellipsoid_fit(K: Body, grid: SphereQuadrature, symmetry_tol: float = 1e-6) -> EllipsoidFit:
    """
    Least-squares fit of h_K(v)^2 by v^T M v, A = M^(1/2), and the relative
    sup residual of h_K(v) against |A v|.

    Raises:
        FitError: If K is not origin-symmetric or M is not positive definite
    """
    V = grid.nodes
    h = K.support(V)
    asymmetry = float(np.abs(h - K.support(-V)).max() / h.max())
    if asymmetry > symmetry_tol:
        raise FitError(f"Ellipsoid fit needs an origin-symmetric body (asymmetry {asymmetry:.3e})")
    n = K.dim
    rows, cols = np.triu_indices(n)
    design = V[:, rows] * V[:, cols] * np.where(rows == cols, 1.0, 2.0)
    coef, *_ = linalg.lstsq(design, h ** 2)
    M = np.zeros((n, n))
    M[rows, cols] = coef
    M[cols, rows] = coef
    smallest = float(linalg.eigvalsh(M).min())
    if smallest <= 0:
        raise FitError(f"Fitted quadratic form is not positive definite (eigenvalue {smallest:.3e})")
    A = spd_sqrt(M)
    residual = float(np.max(np.abs(h - np.linalg.norm(V @ A, axis=1)) / h))
    return EllipsoidFit(A, residual)


def _ellipsoid_residual(K: Body, grid: SphereQuadrature) -> float:
    try:
        return ellipsoid_fit(K, grid).residual
    except FitError as err:
        logger.info("ellipsoid fit failed: %s", err)
        return float("inf")


@dataclass(frozen=True)
class EqualityChain:
    deficit: float
    coplanarity: float


def steiner_equality_chain(K: Body, u, p: float, grid: SphereQuadrature,
                           base_level: int = DEFAULT_LEVEL) -> EqualityChain:
    """Both sides of the equality case: Steiner deficit and midpoint coplanarity."""
    record = petty_steiner_check(K, u, p, grid, base_level)
    return EqualityChain(record.value, midpoint_coplanarity(K, u, base_level))


def verdict_of(fixed_residual: float, ellipsoid_residual: float) -> str:
    fixed = fixed_residual <= FIXED_POINT_TOL
    ellipsoid = ellipsoid_residual <= ELLIPSOID_TOL
    if fixed and ellipsoid:
        return "fixed-point AND ellipsoid"
    if fixed:
        return "fixed-point only"
    if ellipsoid:
        return "ellipsoid only"
    return "neither"


def rigidity_experiment(K: Body, p: float, directions: Sequence, spec: Optional[dict] = None,
                        level: int = DEFAULT_LEVEL, base_level: int = DEFAULT_LEVEL,
                        ts: Sequence[float] = tuple(np.linspace(0.0, 1.0, 11)),
                        pmap: Callable[..., Iterable] = map) -> ExperimentReport:
    """
    The rigidity chain as numbers: per direction the first variation of
    vol(Pi_p^* K_t), its constancy over t, monotonicity and midpoint
    coplanarity; globally the fixed-point residual and the ellipsoid fit.
    """
    check_p(p)
    grid = sphere_grid(K.dim, level)
    report = ExperimentReport("rigidity", spec or {}, {
        "p": p, "grids": {"level": level, "base_level": base_level},
        "directions": [np.asarray(u, dtype=float) for u in directions],
        "t": list(ts)})

    c_star, fixed = fixed_point_residual(K, p, grid)
    report.check("fixed_point_residual", fixed, FIXED_POINT_TOL)
    ellipsoid = _ellipsoid_residual(K, grid)
    report.check("ellipsoid_residual", ellipsoid, ELLIPSOID_TOL)

    def per_direction(u):
        S = ShadowSystem.of(K, u, base_level)
        aligned = grid.aligned(S.u)
        sweep = monotonicity_sweep(S, p, ts, aligned)
        reference = sweep.polar_volumes[-1]
        variation = first_variation_polar_pi(S, p, aligned) / reference
        constancy = float(np.abs(sweep.polar_volumes - reference).max() / reference)
        return u, variation, constancy, sweep, midpoint_coplanarity(K, u, base_level)

    for k, (u, variation, constancy, sweep, coplanar) in enumerate(pmap(per_direction, directions)):
        label = direction_label(u)
        reference = sweep.polar_volumes[-1]
        report.check(f"variation[{label}]", abs(variation), 5e-3)
        report.check(f"constancy[{label}]", constancy, 1e-2)
        report.check(f"monotone[{label}]", sweep.max_increase / reference, 1e-6)
        report.check(f"coplanarity[{label}]", coplanar, 1e-6)
        report.sweeps.append(Sweep(f"sweep{k}", SWEEP_HEADER,
                                   list(zip(sweep.ts, sweep.volumes, sweep.polar_volumes))))

    report.params["c_star"] = c_star
    report.verdict = verdict_of(fixed, ellipsoid)
    logger.info("rigidity verdict: %s", report.verdict)
    return report


@dataclass(frozen=True, eq=False)
class IterationStep:
    step: int
    body: Body
    support: Optional[SampledSupport]
    c_star: float
    fixed_residual: float
    ellipsoid_residual: float
    repair: float = 0.0


def iterate_operator(K0: Body, p: float, steps: int, grid: SphereQuadrature) -> List[IterationStep]:
    """
    K_{j+1} = Wulff shape of h_{Gamma_p Pi_p^* K_j} on the grid, rescaled to
    unit volume. Entry j describes K_j, so the list has steps + 1 entries.
    """
    check_p(p)
    if steps < 0:
        raise DomainError(f"steps must be nonnegative, got {steps}")
    trajectory = []
    K, sampled, repair = K0, None, 0.0
    for j in range(steps + 1):
        produced = gamma_polar_pi(K, p, grid)
        ratios = produced.values / K.support(grid.nodes)
        c_star = 0.5 * float(ratios.max() + ratios.min())
        fixed = float(ratios.max() - ratios.min()) / (2.0 * c_star)
        trajectory.append(IterationStep(j, K, sampled, c_star, fixed,
                                        _ellipsoid_residual(K, grid), repair))
        logger.info("iterate step %d: c*=%.6g fixed=%.3e", j, c_star, fixed)
        if j == steps:
            break
        body, repair = sampled_body(grid, produced.values)
        K = hull(body.vertices * body.volume() ** (-1.0 / body.dim))
        sampled = produced
    return trajectory


# ---------------------------------------------------------------------------
# Suites behind `verify`

@dataclass
class SuiteParams:
    p: float = 2.0
    level: int = DEFAULT_LEVEL
    base_level: int = DEFAULT_LEVEL
    angles: int = 32
    scount: int = 64
    ts: Tuple[float, ...] = tuple(np.linspace(0.0, 1.0, 11))
    directions: Optional[List[np.ndarray]] = None
    u: Optional[np.ndarray] = None
    matrix: Optional[np.ndarray] = None
    seed: int = 0

    def as_dict(self, n: int = 3) -> dict:
        return _plain({"p": self.p, "grids": {"level": self.level, "base_level": self.base_level,
                                              "angles": self.angles, "scount": self.scount},
                       "t": list(self.ts), "directions": self.directions_for(n),
                       "A": self.matrix, "seed": self.seed})

    def directions_for(self, n: int) -> List[np.ndarray]:
        if self.u is not None:
            return [np.asarray(self.u, dtype=float)]
        return self.directions or default_directions(n)


def _needs_space(K: Body, suite: str):
    if K.dim != 3:
        raise DomainError(f"The '{suite}' suite runs in R^3 only")


def _suite_covariance(K, params, report, pmap):
    n = K.dim
    A = params.matrix if params.matrix is not None else np.diag([2.0, 0.5, 1.0][:n])
    A = np.asarray(A, dtype=float)
    grid = sphere_grid(n, params.level)
    result = check_covariance(K, A, params.p, grid)
    report.check("pi_covariance", result.pi_deviation, 1e-9 if isinstance(K, Polytope) else 1e-2)
    report.check("gamma_covariance", result.gamma_deviation, 1e-2)


def _suite_rolodex(K, params, report, pmap):
    _needs_space(K, "rolodex")
    grid = sphere_grid(3, params.level)
    u = params.u if params.u is not None else np.array([0.0, 0.0, 1.0])
    direct = polar_pi_volume(K, params.p, grid)
    rolodex = rolodex_volume(K, u, params.p, params.angles, params.scount, grid, pmap=pmap)
    report.params["volumes"] = {"direct": direct, "rolodex": rolodex}
    report.check("rolodex_gap", abs(rolodex - direct) / direct, 2e-2)


def _suite_monotone(K, params, report, pmap):
    grid = sphere_grid(K.dim, params.level)
    for k, u in enumerate(params.directions_for(K.dim)):
        S = ShadowSystem.of(K, u, params.base_level)
        sweep = monotonicity_sweep(S, params.p, params.ts, grid.aligned(S.u), pmap=pmap)
        scale = sweep.polar_volumes.max()
        report.check(f"monotone[{direction_label(u)}]", sweep.max_increase / scale, 1e-6)
        report.sweeps.append(Sweep(f"sweep{k}", SWEEP_HEADER,
                                   list(zip(sweep.ts, sweep.volumes, sweep.polar_volumes))))


def _suite_convexity(K, params, report, pmap):
    _needs_space(K, "convexity")
    grid = sphere_grid(3, params.level)
    ts = np.linspace(-1.0, 1.0, 9)
    for u in params.directions_for(3)[:1]:
        S = ShadowSystem.of(K, u, params.base_level)
        aligned = grid.aligned(S.u)
        results = list(pmap(lambda F: convexity_check(S, F, params.p, ts, params.scount, aligned),
                            fibers(S.u, 8)))
        label = direction_label(u)
        report.check(f"m_convexity[{label}]", max(r.violation for r in results), 1e-6)
        report.check(f"m_evenness[{label}]", max(r.evenness for r in results), 1e-8)
        report.check(f"m_monotone[{label}]", max(r.monotone_violation for r in results), 1e-6)


def _suite_harmonic(K, params, report, pmap):
    _needs_space(K, "harmonic")
    grid = sphere_grid(3, params.level)
    rng = np.random.default_rng(params.seed)
    u = params.directions_for(3)[0]
    S = ShadowSystem.of(K, u, params.base_level, pushforward=True)
    fiber = fibers(S.u, 8)[0]
    gap = harmonic_inequality_check(S, fiber, params.p, 200, rng, grid.aligned(S.u))
    report.check("harmonic_section_gap", gap.section, 1e-6)
    report.check("harmonic_wedge_gap", gap.wedge, 1e-9)


def _suite_admissible(K, params, report, pmap):
    if isinstance(K, Polytope):
        raise DomainError("The 'admissible' suite needs a smooth body, got a polytope")
    grid = sphere_grid(K.dim, params.level)
    u = params.u if params.u is not None else np.ones(K.dim) / np.sqrt(K.dim)
    S = ShadowSystem.of(K, u, params.base_level)
    aligned = grid.aligned(S.u)
    trace = check_admissible(S, (0.9, 0.99, 0.999), aligned)
    report.check("admissible_final_deviation", trace.deviations[-1], 1e-2)
    report.check("admissible_increase", float(np.max(np.diff(trace.deviations))), 1e-12)
    measure = K.surface_measure(aligned)
    report.check("phi_integral", abs(phi_surface_integral(S, aligned)) / measure.total_mass, 1e-4)


def _suite_petty(K, params, report, pmap):
    grid = sphere_grid(K.dim, params.level)
    directions = params.directions_for(K.dim)
    for record in pmap(lambda u: petty_steiner_check(K, u, params.p, grid, params.base_level),
                       directions):
        report.records.append(record)


def _suite_coplanar(K, params, report, pmap):
    for u in params.directions_for(K.dim):
        report.check(f"coplanarity[{direction_label(u)}]",
                     midpoint_coplanarity(K, u, params.base_level), 1e-6)


SUITES: Dict[str, Callable] = {
    "covariance": _suite_covariance,
    "rolodex": _suite_rolodex,
    "monotone": _suite_monotone,
    "convexity": _suite_convexity,
    "harmonic": _suite_harmonic,
    "admissible": _suite_admissible,
    "petty": _suite_petty,
    "coplanar": _suite_coplanar,
}


def acceptance_suite(name: str, K: Body, params: SuiteParams, spec: Optional[dict] = None,
                     pmap: Callable[..., Iterable] = map) -> ExperimentReport:
    """
    Run one named verification suite.

    Raises:
        DomainError: For an unknown suite or a body the suite cannot take
    """
    if name not in SUITES:
        raise DomainError(f"Unknown suite '{name}'; choose from {', '.join(SUITES)}")
    check_p(params.p)
    report = ExperimentReport(f"verify-{name}", spec or {}, params.as_dict(K.dim))
    SUITES[name](K, params, report, pmap)
    return report
