"""
Command-line front end for the L_p Brunn-Minkowski lab.

    python cli.py op volume --body specs/ball.json
    python cli.py op polar --body specs/cube.json --p 2
    python cli.py verify rolodex --body specs/ball.json --p 2
    python cli.py rigidity --body specs/ellipsoid.json
    python cli.py iterate --body specs/cube.json --steps 2

Exit codes: 0 when everything ran and every check passed, 1 when a check
failed, 2 for usage, body file or I/O errors.
"""

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from colorama import Fore

from bodies import body_to_spec, load_body, steiner
from lab import (SUITES, ExperimentReport, SuiteParams, acceptance_suite, default_directions,
                 format_value, iterate_operator, rigidity_experiment, write_report)
from lp_ops import check_p, gamma_support, pi_support, polar_pi_volume
from numgrid import DomainError, sphere_grid

logger = logging.getLogger(__name__)

OUT_ENV = "LPBMK_OUT"
ITERATE_HEADER = ("step", "c_star", "fixed_residual", "ellipsoid_residual")
OPERATIONS = ("support", "pibody", "gamma", "polar", "steiner", "volume")


def default_out() -> str:
    return os.environ.get(OUT_ENV, "lpbmk-out")


@dataclass
class RunConfig:
    body: Optional[str] = None
    p: float = 2.0
    level: int = 3
    base_level: int = 3
    angles: int = 32
    scount: int = 64
    tgrid: str = "0:1:11"
    u: Optional[object] = None
    directions: Optional[List[List[float]]] = None
    A: Optional[object] = None
    jobs: int = dataclasses.field(default_factory=lambda: os.cpu_count() or 1)
    seed: int = 0
    out: str = dataclasses.field(default_factory=default_out)

    def validate(self) -> "RunConfig":
        """
        Raises:
            DomainError: For out-of-range values
        """
        check_p(self.p)
        if self.level < 0 or self.base_level < 0:
            raise DomainError(f"Grid levels must be nonnegative, got {self.level} and {self.base_level}")
        if self.angles < 1 or self.scount < 2:
            raise DomainError(f"Need angles >= 1 and scount >= 2, got {self.angles} and {self.scount}")
        if self.jobs < 1:
            raise DomainError(f"--jobs must be positive, got {self.jobs}")
        return self


def parse_vector(text) -> np.ndarray:
    """'x,y,z' or a list of numbers."""
    try:
        values = [float(x) for x in (text.split(",") if isinstance(text, str) else text)]
    except (TypeError, ValueError) as err:
        raise DomainError(f"Could not read a vector from {text!r}") from err
    vector = np.array(values)
    if not np.any(vector):
        raise DomainError(f"Direction {text!r} is the zero vector")
    return vector


def parse_tgrid(text: str) -> np.ndarray:
    """'a:b:n' -> n evenly spaced values from a to b."""
    try:
        a, b, n = text.split(":")
        return np.linspace(float(a), float(b), int(n))
    except (AttributeError, ValueError) as err:
        raise DomainError(f"--tgrid expects a:b:n, got {text!r}") from err


def parse_matrix(text) -> Optional[np.ndarray]:
    """'diag:2,0.5,1', rows separated by ';', or a nested list."""
    if text is None:
        return None
    try:
        if isinstance(text, str) and text.startswith("diag:"):
            return np.diag([float(x) for x in text[len("diag:"):].split(",")])
        if isinstance(text, str):
            return np.array([[float(x) for x in row.split(",")] for row in text.split(";")])
        return np.asarray(text, dtype=float)
    except ValueError as err:
        raise DomainError(f"--A expects diag:a,b,c or rows 'a,b;c,d', got {text!r}") from err


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--body", help="Body spec JSON file")
    common.add_argument("--p", type=float, help="Exponent p in (1, 10]")
    common.add_argument("--level", type=int, help="Sphere grid subdivision level")
    common.add_argument("--base-level", dest="base_level", type=int,
                        help="Base grid level for graph bodies")
    common.add_argument("--angles", type=int, help="Fiber count for the rolodex")
    common.add_argument("--scount", type=int, help="Gauss nodes along each fiber's s-axis")
    common.add_argument("--tgrid", help="Shadow parameters as a:b:n")
    common.add_argument("--u", help="Direction x,y,z")
    common.add_argument("--A", dest="A", help="Linear map, diag:a,b,c or 'a,b,c;d,e,f;g,h,i'")
    common.add_argument("--jobs", type=int, help="Worker threads")
    common.add_argument("--seed", type=int, help="Seed for random sampling")
    common.add_argument("--out", help=f"Output directory (default ${OUT_ENV} or ./lpbmk-out)")
    common.add_argument("--config", help="JSON file of RunConfig fields")
    common.add_argument("--verbose", action="store_true", help="Enable debug logging")

    parser = argparse.ArgumentParser(description="Numerical lab for L_p projection and centroid bodies")
    commands = parser.add_subparsers(dest="command", required=True)
    op = commands.add_parser("op", parents=[common], help="Evaluate one operator")
    op.add_argument("operation", choices=OPERATIONS)
    verify = commands.add_parser("verify", parents=[common], help="Run a verification suite")
    verify.add_argument("suite", choices=list(SUITES))
    commands.add_parser("rigidity", parents=[common], help="Run the rigidity experiment")
    iterate = commands.add_parser("iterate", parents=[common], help="Iterate Gamma_p Pi_p^*")
    iterate.add_argument("--steps", type=int, default=3, help="Number of iterations")
    return parser


def build_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the --config file, then explicit flags."""
    config = RunConfig()
    names = {f.name for f in dataclasses.fields(RunConfig)}
    if args.config:
        try:
            with open(args.config, "r", encoding="utf-8") as handle:
                overrides = json.load(handle)
        except json.JSONDecodeError as err:
            raise DomainError(f"{args.config}: not valid JSON ({err})") from err
        if not isinstance(overrides, dict):
            raise DomainError(f"{args.config}: expected a JSON object")
        unknown = sorted(set(overrides) - names)
        if unknown:
            raise DomainError(f"{args.config}: unknown config key '{unknown[0]}'")
        config = dataclasses.replace(config, **overrides)
    flags = {name: getattr(args, name) for name in names
             if getattr(args, name, None) is not None}
    try:
        return dataclasses.replace(config, **flags).validate()
    except TypeError as err:
        raise DomainError(f"Bad config value: {err}") from err


def banner(title: str):
    print("\n" + "=" * 70)
    print(title)
    print("=" * 70)


def mark(passed: bool) -> str:
    return f"{Fore.GREEN}✓{Fore.RESET}" if passed else f"{Fore.RED}✗{Fore.RESET}"


def print_records(report: ExperimentReport):
    for record in report.records:
        print(f"  {mark(record.passed)} {record.name}: "
              f"{format_value(record.value)} (tol {format_value(record.tol)})")


def _load(config: RunConfig):
    if config.body is None:
        raise DomainError("--body is required")
    return load_body(config.body)


def _prepare_out(config: RunConfig) -> Path:
    out = Path(config.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise OSError(f"Could not create output directory {out}: {err.strerror or err}") from err
    return out


def _print_table(nodes: np.ndarray, values: np.ndarray):
    for v, value in zip(nodes, values):
        print(",".join(format_value(x) for x in v) + "," + format_value(value))


def cmd_op(args, config: RunConfig, pmap) -> int:
    K, spec = _load(config)
    grid = sphere_grid(K.dim, config.level)
    u = None if config.u is None else parse_vector(config.u)
    operation = args.operation

    if operation == "volume":
        print(format_value(K.volume()))
    elif operation == "polar":
        print(format_value(polar_pi_volume(K, config.p, grid)))
    elif operation == "steiner":
        if u is None:
            raise DomainError("op steiner needs --u")
        symmetral = steiner(K, u, base_level=config.base_level)
        target = _prepare_out(config) / "steiner.json"
        try:
            target.write_text(json.dumps(body_to_spec(symmetral, grid), indent=2) + "\n",
                              encoding="utf-8")
        except OSError as err:
            raise OSError(f"Could not write {target}: {err.strerror or err}") from err
        print(f"volume before: {format_value(K.volume())}")
        print(f"volume after:  {format_value(symmetral.volume())}")
        print(f"symmetral written to {target}")
    else:
        nodes = grid.nodes if u is None else u[None, :]
        if operation == "support":
            values = K.support(nodes)
        elif operation == "pibody":
            values = pi_support(K, config.p, nodes, grid=grid)
        else:
            values = gamma_support(K.radial, config.p, nodes, grid)
        if u is None:
            _print_table(nodes, values)
        else:
            print(format_value(values[0]))
    return 0


def suite_params(config: RunConfig) -> SuiteParams:
    directions = None if config.directions is None else \
        [parse_vector(d) for d in config.directions]
    return SuiteParams(p=config.p, level=config.level, base_level=config.base_level,
                       angles=config.angles, scount=config.scount,
                       ts=tuple(parse_tgrid(config.tgrid)), directions=directions,
                       u=None if config.u is None else parse_vector(config.u),
                       matrix=parse_matrix(config.A), seed=config.seed)


def cmd_verify(args, config: RunConfig, pmap) -> int:
    K, spec = _load(config)
    out = _prepare_out(config)
    banner(f"VERIFY {args.suite.upper()}: {config.body}")
    report = acceptance_suite(args.suite, K, suite_params(config), spec=spec, pmap=pmap)
    write_report(report, out / f"verify-{args.suite}.json")
    print_records(report)
    print(f"\n{mark(report.passed)} {'all checks passed' if report.passed else 'some checks failed'}")
    return 0 if report.passed else 1


def cmd_rigidity(args, config: RunConfig, pmap) -> int:
    K, spec = _load(config)
    out = _prepare_out(config)
    if config.directions is not None:
        directions = [parse_vector(d) for d in config.directions]
    elif config.u is not None:
        directions = [parse_vector(config.u)]
    else:
        directions = default_directions(K.dim)
    banner(f"RIGIDITY: {config.body} (p = {config.p:g})")
    report = rigidity_experiment(K, config.p, directions, spec=spec, level=config.level,
                                 base_level=config.base_level,
                                 ts=tuple(parse_tgrid(config.tgrid)), pmap=pmap)
    write_report(report, out / "rigidity.json")
    print_records(report)
    print(f"\nVerdict: {report.verdict}")
    return 0


def cmd_iterate(args, config: RunConfig, pmap) -> int:
    K, spec = _load(config)
    out = _prepare_out(config)
    if args.steps < 0:
        raise DomainError(f"--steps must be nonnegative, got {args.steps}")
    banner(f"ITERATE: {config.body} (p = {config.p:g}, {args.steps} steps)")
    trajectory = iterate_operator(K, config.p, args.steps, sphere_grid(K.dim, config.level))
    target = out / "iterate.csv"
    try:
        with open(target, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(ITERATE_HEADER)
            for entry in trajectory[1:]:
                writer.writerow([format_value(entry.step), format_value(entry.c_star),
                                 format_value(entry.fixed_residual),
                                 format_value(entry.ellipsoid_residual)])
    except OSError as err:
        raise OSError(f"Could not write {target}: {err.strerror or err}") from err
    for entry in trajectory:
        print(f"  step {entry.step}: c* = {format_value(entry.c_star)}, "
              f"fixed = {format_value(entry.fixed_residual)}, "
              f"ellipsoid = {format_value(entry.ellipsoid_residual)}")
    print(f"trajectory written to {target}")
    return 0


COMMANDS = {
    "op": cmd_op,
    "verify": cmd_verify,
    "rigidity": cmd_rigidity,
    "iterate": cmd_iterate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as stop:
        return int(stop.code or 0)

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = build_config(args)
        with ThreadPoolExecutor(max_workers=config.jobs) as pool:
            return COMMANDS[args.command](args, config, pool.map)
    except (ValueError, OSError) as err:
        print(f"{Fore.RED}error:{Fore.RESET} {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
