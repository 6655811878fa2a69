"""
Tests for the command line (src/cli.py).

Commands are driven through main(argv) with files under tmp_path; stdout and
stderr are read back with capsys. Exit statuses: 0 success, 1 parse or
validation error, 2 solver error, 3 failed verification.
"""

import json
import math

import numpy as np
import pytest

from src.cli import (
    BenchCell,
    check_plan,
    generate_instance,
    log_fit,
    main,
    rationalize,
    summarize,
)
from src.core import validate_instance
from src.errors import NonPositiveMarginal
from src.formats import read_instance_file, read_plan_file, read_report, read_trace_rows

from .conftest import INSTANCE_A, OPT_A

TRIANGLE_TEXT = "p mcc 3 3\na 1 2 2 -1\na 2 3 2 -1\na 3 1 2 -1\n"


@pytest.fixture
def instance_file(tmp_path):
    path = tmp_path / "a.json"
    path.write_text(json.dumps({"n": 2, "m": 2, **INSTANCE_A}))
    return path


@pytest.fixture
def write_json(tmp_path):
    def _write_json(name, document):
        path = tmp_path / name
        path.write_text(json.dumps(document))
        return path

    return _write_json


def output_value(text, key):
    """Value of a `key: value` line printed by a command."""
    for line in text.splitlines():
        if line.startswith(f"{key}:"):
            return line.split(":", 1)[1].strip()
    raise AssertionError(f"no '{key}:' line in {text!r}")


# ---------------------------------------------------------------------------
# Test: solve
# ---------------------------------------------------------------------------


class TestSolve:
    """Tests for the solve command."""

    # ----- Successful runs -----

    def test_instance_a(self, instance_file, tmp_path, capsys):
        """Instance A prints cost, iterations and gap bound and writes plan and trace."""
        plan_path, trace_path = tmp_path / "plan.json", tmp_path / "trace.csv"

        status = main(
            [
                "solve", str(instance_file), "--epsilon", "1e-3",
                "--output", str(plan_path), "--trace", str(trace_path),
            ]
        )

        out = capsys.readouterr().out
        assert status == 0
        assert float(output_value(out, "cost")) == pytest.approx(OPT_A, abs=1e-3)
        assert int(output_value(out, "iterations")) > 0
        assert float(output_value(out, "gap_bound")) <= 1e-3
        plan = read_plan_file(plan_path)
        np.testing.assert_allclose(plan.matrix().sum(axis=1), INSTANCE_A["r"], atol=1e-9)
        assert len(read_trace_rows(trace_path)) == int(output_value(out, "iterations")) + 1

    def test_plain_mode(self, instance_file, capsys):
        """--mode plain runs the fixed-eta baseline."""
        assert main(["solve", str(instance_file), "--mode", "plain", "--epsilon", "1e-1"]) == 0
        assert float(output_value(capsys.readouterr().out, "cost")) >= OPT_A - 1e-9

    def test_rationalize(self, write_json, tmp_path, capsys):
        """Fractional marginals solve after scaling by --rationalize."""
        doc = {"n": 2, "m": 2, "Q": [[1, 2], [3, 1]], "r": [0.5, 0.5], "c": [0.25, 0.75]}
        path = write_json("frac.json", doc)
        plan_path = tmp_path / "plan.json"

        status = main(["solve", str(path), "--rationalize", "4", "--output", str(plan_path)])

        assert status == 0
        assert float(output_value(capsys.readouterr().out, "cost")) == pytest.approx(
            1.25, abs=1e-3
        )
        X = read_plan_file(plan_path).matrix()
        np.testing.assert_allclose(X.sum(axis=1), doc["r"], atol=1e-9)
        np.testing.assert_allclose(X.sum(axis=0), doc["c"], atol=1e-9)

    def test_info_logs_are_json_on_stderr(self, instance_file, capsys):
        """--log-level info writes one JSON object per line to stderr."""
        assert main(["--log-level", "info", "solve", str(instance_file)]) == 0

        records = [json.loads(line) for line in capsys.readouterr().err.splitlines()]
        finished = [rec for rec in records if rec["message"] == "ExpSinkhorn finished"]
        assert finished and finished[0]["n"] == 2

    # ----- Failures -----

    def test_cap_exceeded_is_solver_error(self, instance_file, capsys):
        """Hitting --cap exits with status 2."""
        status = main(["solve", str(instance_file), "--mode", "plain", "--cap", "2"])

        assert status == 2
        assert "exceeded 2 steps" in capsys.readouterr().err

    def test_negative_epsilon_is_usage_error(self, instance_file, capsys):
        """A negative --epsilon exits with status 1."""
        assert main(["solve", str(instance_file), "--epsilon", "-1"]) == 1
        assert "must be positive" in capsys.readouterr().err

    def test_zero_cap_is_usage_error(self, instance_file, capsys):
        """--cap 0 is rejected by the parser."""
        assert main(["solve", str(instance_file), "--cap", "0"]) == 1
        assert "positive integer" in capsys.readouterr().err

    def test_missing_file(self, tmp_path, capsys):
        """An unreadable instance file exits with status 1."""
        assert main(["solve", str(tmp_path / "nope.json")]) == 1
        assert "Cannot read" in capsys.readouterr().err

    def test_unbalanced_instance(self, write_json, capsys):
        """Unequal total supply and demand exits with status 1."""
        path = write_json("bad.json", {"n": 1, "m": 1, "Q": [[1]], "r": [2], "c": [1]})

        assert main(["solve", str(path)]) == 1
        assert "differs from total supply" in capsys.readouterr().err

    def test_fractional_marginals_need_rationalize(self, write_json):
        """Fractional marginals without --rationalize exit with status 1."""
        doc = {"n": 2, "m": 2, "Q": [[1, 2], [3, 1]], "r": [0.5, 0.5], "c": [0.25, 0.75]}
        path = write_json("frac.json", doc)

        assert main(["solve", str(path)]) == 1


# ---------------------------------------------------------------------------
# Test: verify
# ---------------------------------------------------------------------------


class TestVerify:
    """Tests for the verify command."""

    def test_solved_plan_passes(self, instance_file, tmp_path, capsys):
        """A plan written by solve verifies."""
        plan_path = tmp_path / "plan.json"
        main(["solve", str(instance_file), "--output", str(plan_path)])
        capsys.readouterr()

        assert main(["verify", str(instance_file), str(plan_path)]) == 0
        assert capsys.readouterr().out.startswith("PASS")

    def test_self_check(self, instance_file, capsys):
        """--self solves and verifies in one go."""
        assert main(["verify", str(instance_file), "--self"]) == 0
        assert "OPT 4" in capsys.readouterr().out

    @pytest.mark.parametrize(
        "X, cost, failure",
        [
            ([[1, 1], [0, 1.5]], 5.5, "feasibility"),
            ([[0, 2], [1, 0]], 7, "optimality"),
            ([[1, 1], [0, 1]], 3, "cost field"),
            ([[1, 2, 0], [0, 0, 1]], 6, "shape"),
        ],
    )
    def test_bad_plans_fail(self, instance_file, write_json, capsys, X, cost, failure):
        """Each kind of bad plan exits with status 3 and names the failed check."""
        plan_path = write_json("plan.json", {"n": len(X), "m": len(X[0]), "X": X, "cost": cost})

        assert main(["verify", str(instance_file), str(plan_path)]) == 3
        assert failure in capsys.readouterr().err

    def test_needs_plan_or_self(self, instance_file):
        """verify without a plan or --self is a usage error."""
        assert main(["verify", str(instance_file)]) == 1


# ---------------------------------------------------------------------------
# Test: gen
# ---------------------------------------------------------------------------


class TestGen:
    """Tests for the gen command and generate_instance()."""

    # ----- Generated files -----

    def test_deterministic(self, tmp_path):
        """The same seed writes byte-identical files."""
        first, second = tmp_path / "1.json", tmp_path / "2.json"

        assert main(["gen", "--n", "3", "--m", "4", "--seed", "7", str(first)]) == 0
        assert main(["gen", "--n", "3", "--m", "4", "--seed", "7", str(second)]) == 0

        assert first.read_bytes() == second.read_bytes()

    def test_generated_file_validates(self, tmp_path):
        """A generated file loads and respects --marg-max."""
        path = tmp_path / "g.json"
        main(["gen", "--n", "5", "--m", "2", "--marg-max", "4", "--seed", "3", str(path)])

        doc = read_instance_file(path)
        inst = validate_instance(doc.Q, doc.r, doc.c)

        assert (inst.n, inst.m) == (5, 2)
        assert inst.r.max() <= 4 and inst.c.max() <= 4

    @pytest.mark.parametrize("seed", range(20))
    def test_generator_always_valid(self, seed):
        """Feasible bounds always give a valid instance within them."""
        rng = np.random.default_rng(seed)
        n, m, marg_max = (int(v) for v in rng.integers(1, 7, size=3))
        marg_max = max(marg_max, -(-max(n, m) // min(n, m)))

        inst = generate_instance(n, m, cost_max=10, marg_max=marg_max, seed=seed)

        assert inst.r.max() <= marg_max and inst.c.max() <= marg_max
        assert inst.Q.min() >= 1 and inst.Q.max() <= 10

    # ----- Bad flags -----

    @pytest.mark.parametrize(
        "flags",
        [
            ["--n", "0", "--m", "2"],
            ["--m", "2"],
            ["--n", "2", "--m", "x"],
            ["--n", "1", "--m", "3", "--marg-max", "2"],
            ["--n", "2", "--m", "2", "--seed", "-1"],
        ],
    )
    def test_bad_flags(self, tmp_path, capsys, flags):
        """Bad or infeasible flags exit with status 1 and no traceback."""
        assert main(["gen", *flags, str(tmp_path / "g.json")]) == 1
        assert "Traceback" not in capsys.readouterr().err


# ---------------------------------------------------------------------------
# Test: bench
# ---------------------------------------------------------------------------


class TestBench:
    """Tests for the bench command."""

    # ----- Sweeps -----

    def test_instance_sweep(self, instance_file, tmp_path, capsys):
        """A sweep over eps writes one row per eps with growing iteration counts."""
        report = tmp_path / "report.csv"

        status = main(
            [
                "bench", "--instance", str(instance_file),
                "--eps-list", "1e-1", "1e-2", "1e-3", "--output", str(report),
            ]
        )

        assert status == 0
        rows = read_report(report)
        assert [row.epsilon for row in rows] == [1e-1, 1e-2, 1e-3]
        iterations = [row.median_iterations for row in rows]
        assert iterations == sorted(iterations)
        assert all(row.median_cost_gap <= row.epsilon for row in rows)
        assert "slope per log(1/eps)" in capsys.readouterr().out

    def test_single_cell(self, instance_file, tmp_path):
        """One eps gives a header and one row."""
        report = tmp_path / "report.csv"

        argv = ["bench", "--instance", str(instance_file), "--eps-list", "1e-2"]

        assert main([*argv, "--output", str(report)]) == 0
        assert len(report.read_text().splitlines()) == 2

    def test_generated_instances_and_both_modes(self, tmp_path):
        """Seeds and modes multiply into cells, one report row per mode and eps."""
        report = tmp_path / "report.csv"

        status = main(
            [
                "bench", "--n", "3", "--m", "3", "--seeds", "0", "1",
                "--modes", "expsinkhorn", "plain", "--eps-list", "1e-1",
                "--workers", "2", "--output", str(report),
            ]
        )

        assert status == 0
        assert [(row.mode, row.cells) for row in read_report(report)] == [
            ("expsinkhorn", 2),
            ("plain", 2),
        ]

    # ----- Failures -----

    def test_every_cell_failing(self, instance_file):
        """If every cell fails the command exits with status 2."""
        status = main(
            [
                "bench", "--instance", str(instance_file), "--modes", "plain",
                "--eps-list", "1e-3", "--cap", "1",
            ]
        )

        assert status == 2

    @pytest.mark.parametrize(
        "flags, message",
        [
            (["--workers", "0"], "positive integer"),
            (["--workers", "-2"], "positive integer"),
            (["--seeds", "-1"], "non-negative integer"),
            (["--seeds", "0", "-3"], "non-negative integer"),
            (["--cap", "0"], "positive integer"),
        ],
    )
    def test_bad_counts_are_usage_errors(self, tmp_path, capsys, flags, message):
        """Non-positive worker counts and negative seeds exit with status 1."""
        argv = ["bench", "--n", "2", "--m", "2", "--eps-list", "1e-1", *flags]

        assert main([*argv, "--output", str(tmp_path / "report.csv")]) == 1
        err = capsys.readouterr().err
        assert message in err
        assert "Traceback" not in err


# ---------------------------------------------------------------------------
# Test: mcc
# ---------------------------------------------------------------------------


class TestMcc:
    """Tests for the mcc solve and mcc reduce commands."""

    @pytest.fixture
    def triangle_file(self, tmp_path):
        path = tmp_path / "triangle.mcc"
        path.write_text(TRIANGLE_TEXT)
        return path

    # ----- solve -----

    def test_solve(self, triangle_file, tmp_path, capsys):
        """The negative triangle prints cost -6 and writes the flow file."""
        out_path = tmp_path / "flow.txt"

        assert main(["mcc", "solve", str(triangle_file), "--output", str(out_path)]) == 0
        assert capsys.readouterr().out.strip() == "cost: -6"
        assert out_path.read_text().splitlines()[0] == "s -6"

    def test_positive_costs(self, tmp_path, capsys):
        """A positive two-cycle prints cost 0."""
        path = tmp_path / "pos.mcc"
        path.write_text("p mcc 2 2\na 1 2 1 2\na 2 1 1 1\n")

        assert main(["mcc", "solve", str(path)]) == 0
        assert capsys.readouterr().out.strip() == "cost: 0"

    def test_malformed_file(self, tmp_path, capsys):
        """A header announcing more arcs than present exits with status 1."""
        path = tmp_path / "bad.mcc"
        path.write_text("p mcc 2 1\n")

        assert main(["mcc", "solve", str(path)]) == 1
        assert "declares 1 arcs" in capsys.readouterr().err

    # ----- reduce -----

    def test_reduce_round_trips_through_instance_file(self, triangle_file, tmp_path):
        """The reduced instance file loads as a valid 3x3 instance."""
        out_path = tmp_path / "reduced.json"

        assert main(["mcc", "reduce", str(triangle_file), str(out_path)]) == 0

        doc = read_instance_file(out_path)
        inst = validate_instance(doc.Q, doc.r, doc.c)
        assert (inst.n, inst.m) == (3, 3)
        assert doc.Q[0] == [-1, 6, 0]

    def test_reduce_needs_prune_for_starved_vertices(self, tmp_path):
        """Starved vertices fail the reduction unless --prune drops them."""
        path = tmp_path / "starved.mcc"
        path.write_text("p mcc 3 3\na 1 2 1 -1\na 2 1 1 -1\na 3 1 1 -1\n")
        out_path = tmp_path / "reduced.json"

        assert main(["mcc", "reduce", str(path), str(out_path)]) == 1
        assert main(["mcc", "reduce", str(path), str(out_path), "--prune"]) == 0
        assert read_instance_file(out_path).n == 2


# ---------------------------------------------------------------------------
# Test: helpers
# ---------------------------------------------------------------------------


class TestHelpers:
    """Tests for rationalize(), check_plan(), log_fit() and summarize()."""

    # ----- rationalize -----

    def test_rationalize_rebalances_last_supply(self):
        """Rounding drift is moved onto the last supply entry."""
        r, c = rationalize([0.34, 0.66], [0.5, 0.5], 10)

        np.testing.assert_array_equal(r, [3, 7])
        np.testing.assert_array_equal(c, [5, 5])

    def test_rationalize_rejects_vanishing_entries(self):
        """An entry that rounds to zero is refused."""
        with pytest.raises(NonPositiveMarginal):
            rationalize([0.01, 0.99], [0.5, 0.5], 10)

    # ----- check_plan -----

    def test_check_plan_passes_optimum(self, instance_a):
        """The optimal plan of instance A has no failures."""
        X = np.array([[1.0, 1.0], [0.0, 1.0]])

        assert check_plan(X, instance_a, OPT_A, 1e-3, reported=4.0) == []

    def test_check_plan_lists_every_failure(self, instance_a):
        """Every failed check is listed in order."""
        X = np.array([[-1.0, 3.0], [1.0, 0.0]])

        failures = check_plan(X, instance_a, OPT_A, 1e-3, reported=None)

        assert [f.split(":")[0] for f in failures] == ["nonnegativity", "feasibility", "optimality"]

    # ----- Report aggregation -----

    def test_log_fit_exact_line(self):
        """An exact affine series fits with R^2 = 1."""
        epsilons = [1e-1, 1e-2, 1e-3]
        iterations = [10 + 4 * math.log(1 / eps) for eps in epsilons]

        slope, r_squared = log_fit(epsilons, iterations)

        assert slope == pytest.approx(4.0)
        assert r_squared == pytest.approx(1.0)

    def test_summarize_orders_and_counts(self):
        """Rows are ordered by mode and eps with medians and failure counts."""
        cells = [
            BenchCell("plain", 1e-2, 0, error="cap"),
            BenchCell("expsinkhorn", 1e-2, 0, iterations=30, cost_gap=0.0),
            BenchCell("expsinkhorn", 1e-1, 1, iterations=12, cost_gap=0.0),
            BenchCell("expsinkhorn", 1e-1, 0, iterations=10, cost_gap=0.5),
        ]

        rows = summarize(cells)

        assert [(row.mode, row.epsilon) for row in rows] == [
            ("expsinkhorn", 1e-1),
            ("expsinkhorn", 1e-2),
            ("plain", 1e-2),
        ]
        assert rows[0].median_iterations == 11
        assert rows[0].median_cost_gap == 0.25
        assert rows[2].failures == 1
        assert math.isnan(rows[2].median_iterations)
