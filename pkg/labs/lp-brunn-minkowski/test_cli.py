import contextlib
import io
import json
import os
import tempfile
import unittest
from pathlib import Path

import numpy as np

from cli import ITERATE_HEADER, main, parse_matrix, parse_tgrid, parse_vector
from numgrid import DomainError, unit_ball_volume

SPECS = Path(__file__).resolve().parent / "specs"


def run(*argv):
    """main() with captured output: (exit code, stdout, stderr)"""
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main([str(a) for a in argv])
    return code, out.getvalue(), err.getvalue()


class TestParsing(unittest.TestCase):

    def test_vectors(self):
        np.testing.assert_allclose(parse_vector("1,0,2"), [1.0, 0.0, 2.0])
        np.testing.assert_allclose(parse_vector([0, 1]), [0.0, 1.0])
        with self.assertRaises(DomainError):
            parse_vector("0,0,0")
        with self.assertRaises(DomainError):
            parse_vector("a,b")

    def test_tgrid(self):
        np.testing.assert_allclose(parse_tgrid("0:1:5"), [0.0, 0.25, 0.5, 0.75, 1.0])
        with self.assertRaises(DomainError):
            parse_tgrid("0:1")

    def test_matrix(self):
        np.testing.assert_allclose(parse_matrix("diag:2,0.5,1"), np.diag([2.0, 0.5, 1.0]))
        np.testing.assert_allclose(parse_matrix("1,2;3,4"), [[1.0, 2.0], [3.0, 4.0]])
        self.assertIsNone(parse_matrix(None))
        with self.assertRaises(DomainError):
            parse_matrix("diag:x")


class TestOperations(unittest.TestCase):

    def test_ball_volume(self):
        code, out, _ = run("op", "volume", "--body", SPECS / "ball.json")
        self.assertEqual(code, 0)
        self.assertAlmostEqual(float(out.strip()), unit_ball_volume(3), places=8)

    def test_cube_polar_volume(self):
        code, out, _ = run("op", "polar", "--body", SPECS / "cube.json", "--p", 2, "--jobs", 1)
        self.assertEqual(code, 0)
        expected = unit_ball_volume(3) * (np.pi / 6.0) ** 1.5
        self.assertAlmostEqual(float(out.strip()), expected, places=8)

    def test_support_along_direction(self):
        code, out, _ = run("op", "support", "--body", SPECS / "cube.json", "--u", "1,1,0")
        self.assertEqual(code, 0)
        self.assertAlmostEqual(float(out.strip()), 2.0, places=9)

    def test_support_table(self):
        code, out, _ = run("op", "support", "--body", SPECS / "ball.json", "--level", 1)
        self.assertEqual(code, 0)
        rows = [line.split(",") for line in out.strip().splitlines()]
        self.assertEqual(len(rows), 80)
        for row in rows:
            self.assertEqual(len(row), 4)
            self.assertAlmostEqual(float(row[3]), 1.0, places=9)

    def test_steiner_writes_symmetral(self):
        with tempfile.TemporaryDirectory() as tmp:
            code, out, _ = run("op", "steiner", "--body", SPECS / "tetrahedron.json",
                               "--u", "0,0,1", "--out", tmp)
            self.assertEqual(code, 0)
            spec = json.loads((Path(tmp) / "steiner.json").read_text(encoding="utf-8"))
            self.assertEqual(spec["kind"], "polytope")
            self.assertIn("volume after", out)


class TestErrors(unittest.TestCase):

    def test_missing_body_file(self):
        code, _, err = run("op", "volume", "--body", SPECS / "no-such-body.json")
        self.assertEqual(code, 2)
        self.assertIn("no-such-body.json", err)

    def test_bad_body_spec(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "bad.json")
            with open(path, "w", encoding="utf-8") as handle:
                json.dump({"kind": "polytope", "vertices": [[0, 0, 0]], "color": "red"}, handle)
            code, _, err = run("op", "volume", "--body", path)
            self.assertEqual(code, 2)
            self.assertIn("color", err)

    def test_unknown_config_key(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "config.json")
            with open(path, "w", encoding="utf-8") as handle:
                json.dump({"p": 2.0, "resolution": 5}, handle)
            code, _, err = run("op", "volume", "--body", SPECS / "ball.json", "--config", path)
            self.assertEqual(code, 2)
            self.assertIn("resolution", err)

    def test_p_out_of_range(self):
        code, _, _ = run("op", "polar", "--body", SPECS / "ball.json", "--p", 1.0)
        self.assertEqual(code, 2)

    def test_unknown_subcommand(self):
        code, _, _ = run("frobnicate")
        self.assertEqual(code, 2)

    def test_unwritable_out(self):
        with tempfile.TemporaryDirectory() as tmp:
            blocker = os.path.join(tmp, "file")
            with open(blocker, "w", encoding="utf-8") as handle:
                handle.write("x")
            code, _, err = run("iterate", "--body", SPECS / "ball.json", "--steps", 0,
                               "--out", os.path.join(blocker, "out"))
            self.assertEqual(code, 2)
            self.assertIn("file", err)


class TestCommands(unittest.TestCase):

    def test_config_file_supplies_defaults(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "config.json")
            with open(path, "w", encoding="utf-8") as handle:
                json.dump({"body": str(SPECS / "ball.json"), "level": 1}, handle)
            code, out, _ = run("op", "volume", "--config", path)
            self.assertEqual(code, 0)
            self.assertAlmostEqual(float(out.strip()), unit_ball_volume(3), places=8)

    def test_iterate_zero_steps(self):
        with tempfile.TemporaryDirectory() as tmp:
            code, _, _ = run("iterate", "--body", SPECS / "ball.json", "--steps", 0,
                             "--level", 1, "--out", tmp)
            self.assertEqual(code, 0)
            raw = (Path(tmp) / "iterate.csv").read_text(encoding="utf-8")
            self.assertEqual(raw, ",".join(ITERATE_HEADER) + "\n")

    def test_iterate_ball(self):
        with tempfile.TemporaryDirectory() as tmp:
            code, _, _ = run("iterate", "--body", SPECS / "ball.json", "--steps", 2,
                             "--level", 2, "--out", tmp)
            self.assertEqual(code, 0)
            lines = (Path(tmp) / "iterate.csv").read_text(encoding="utf-8").splitlines()
            self.assertEqual(len(lines), 3)
            for line in lines[1:]:
                step, _, fixed, ellipsoid = (float(x) for x in line.split(","))
                self.assertLessEqual(fixed, 1e-3, msg=f"step {step}")
                self.assertLessEqual(ellipsoid, 1e-3, msg=f"step {step}")

    def test_verify_covariance(self):
        with tempfile.TemporaryDirectory() as tmp:
            code, out, _ = run("verify", "covariance", "--body", SPECS / "cube.json",
                               "--A", "diag:2,0.5,1", "--out", tmp)
            self.assertEqual(code, 0, msg=out)
            report = json.loads((Path(tmp) / "verify-covariance.json").read_text(encoding="utf-8"))
            self.assertEqual(report["experiment"], "verify-covariance")
            self.assertTrue(all(r["pass"] for r in report["records"]))
            self.assertEqual(report["body"]["kind"], "polytope")

    def test_verify_failure_exit_code(self):
        """Midpoints of the cube along a diagonal are not coplanar"""
        with tempfile.TemporaryDirectory() as tmp:
            code, _, _ = run("verify", "coplanar", "--body", SPECS / "cube.json",
                             "--u", "1,1,1", "--base-level", 2, "--out", tmp)
            self.assertEqual(code, 1)

    def test_admissible_rejects_polytope(self):
        with tempfile.TemporaryDirectory() as tmp:
            code, _, err = run("verify", "admissible", "--body", SPECS / "cube.json", "--out", tmp)
            self.assertEqual(code, 2)
            self.assertIn("polytope", err)


if __name__ == "__main__":
    unittest.main()
