"""
Command-line front end.

Usage examples:

    # Random integral instance, deterministic in the seed
    expsinkhorn gen --n 4 --m 5 --cost-max 10 --marg-max 6 --seed 1 inst.json

    # Solve to additive error 1e-4, writing the plan and the step trace
    expsinkhorn solve inst.json --epsilon 1e-4 --output plan.json --trace trace.csv

    # Check a plan against the exact optimum (or solve and check with --self)
    expsinkhorn verify inst.json plan.json
    expsinkhorn verify inst.json --self

    # Iteration counts across accuracies, both engines, five seeds
    expsinkhorn bench --eps-list 1e-1 1e-2 1e-3 --modes expsinkhorn plain \\
        --seeds 0 1 2 3 4 --output report.csv

    # Minimum-cost circulation through the OT reduction
    expsinkhorn mcc solve cycle.mcc
    expsinkhorn mcc reduce cycle.mcc reduced.json

Results go to stdout, JSON logs and error messages to stderr. Exit status:
0 success, 1 parse or validation error, 2 solver error, 3 failed
verification.
"""

import argparse
import logging
import math
import statistics
import sys
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike

from src.baseline import run_plain_sinkhorn
from src.config import settings
from src.core import FEAS_TOL, TransportInstance, TransportPlan, validate_instance
from src.errors import (
    NonPositiveMarginal,
    SolverError,
    UsageError,
    VerificationFailed,
)
from src.formats import (
    InstanceFile,
    PlanFile,
    ReportRow,
    format_circulation,
    parse_dimacs,
    read_instance_file,
    read_plan_file,
    read_text,
    write_model,
    write_report,
    write_trace,
)
from src.logs import configure_logging
from src.mcc import mcc_to_ot, prune_uncirculating, solve_mcc
from src.oracle import exact_ot
from src.repair import repair_plan, round_feasible_simple
from src.sinkhorn import SinkhornRun, gap_bound, run_expsinkhorn

logger = logging.getLogger("expsinkhorn.cli")

MODES = ("expsinkhorn", "plain")


# ---------------------------------------------------------------------------
# Helpers shared by the commands
# ---------------------------------------------------------------------------


def run_mode(
    mode: str, inst: TransportInstance, epsilon: float, cap: int | None = None
) -> SinkhornRun:
    if mode == "plain":
        return run_plain_sinkhorn(inst, epsilon, limits=cap)
    return run_expsinkhorn(inst, epsilon, limits=cap)


def solve_instance(
    inst: TransportInstance, epsilon: float, mode: str = "expsinkhorn", cap: int | None = None
) -> tuple[TransportPlan, SinkhornRun]:
    """Scaling run followed by repair; the plan is feasible for inst."""
    run = run_mode(mode, inst, epsilon, cap)
    return repair_plan(run.x, inst), run


def rationalize(r: ArrayLike, c: ArrayLike, denominator: int) -> tuple[np.ndarray, np.ndarray]:
    """
    Integral marginals approximating r * denominator and c * denominator.

    Both vectors are rounded to the nearest integer; the rounding imbalance
    is moved onto the last entry of c.

    Raises:
        NonPositiveMarginal: if an entry rounds to zero
    """
    r_int = np.rint(np.asarray(r, dtype=np.float64) * denominator).astype(np.int64)
    c_int = np.rint(np.asarray(c, dtype=np.float64) * denominator).astype(np.int64)
    c_int[-1] += r_int.sum() - c_int.sum()
    if np.any(r_int < 1) or np.any(c_int < 1):
        raise NonPositiveMarginal(
            f"Marginals vanish at denominator {denominator}; use a larger --rationalize"
        )
    return r_int, c_int


def generate_instance(
    n: int, m: int, cost_max: int, marg_max: int, seed: int
) -> TransportInstance:
    """
    Seeded random integral instance.

    Costs are uniform in [1, cost_max]. A total mass is drawn uniformly from
    [max(n, m), min(n, m) * marg_max] and split over each marginal by
    starting every entry at 1 and adding units to random entries that are
    still below marg_max.
    """
    rng = np.random.default_rng(seed)
    Q = rng.integers(1, cost_max + 1, size=(n, m))
    total = int(rng.integers(max(n, m), min(n, m) * marg_max + 1))

    def split(size: int) -> np.ndarray:
        parts = np.ones(size, dtype=np.int64)
        for _ in range(total - size):
            parts[rng.choice(np.flatnonzero(parts < marg_max))] += 1
        return parts

    r = split(n)
    c = split(m)
    return validate_instance(Q, r, c)


def load_instance(path: Path, denominator: int | None = None) -> TransportInstance:
    doc = read_instance_file(path)
    if denominator is None:
        return validate_instance(doc.Q, doc.r, doc.c)
    r_int, c_int = rationalize(doc.r, doc.c, denominator)
    return validate_instance(doc.Q, r_int, c_int)


def check_plan(
    X: np.ndarray, inst: TransportInstance, opt: float, epsilon: float, reported: float | None
) -> list[str]:
    """Failed checks of a plan against the exact optimum, empty when it passes."""
    failures = []
    if X.shape != (inst.n, inst.m):
        return [f"shape: plan is {X.shape[0]}x{X.shape[1]}, instance is {inst.n}x{inst.m}"]
    if np.any(X < 0):
        failures.append(f"nonnegativity: min entry {float(X.min()):.6g}")
    row_error = float(np.max(np.abs(X.sum(axis=1) - inst.r)))
    if row_error > FEAS_TOL:
        failures.append(f"feasibility: row sums off by up to {row_error:.6g}")
    col_error = float(np.max(np.abs(X.sum(axis=0) - inst.c)))
    if col_error > FEAS_TOL:
        failures.append(f"feasibility: column sums off by up to {col_error:.6g}")
    cost = inst.cost(X)
    if cost > opt + epsilon:
        failures.append(f"optimality: cost {cost:.12g} exceeds OPT {opt:.12g} + {epsilon:g}")
    if reported is not None and abs(reported - cost) > 1e-9 * max(1.0, abs(cost)):
        failures.append(f"cost field: file says {reported:.12g}, plan costs {cost:.12g}")
    return failures


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_solve(args: argparse.Namespace) -> int:
    epsilon = args.epsilon
    if args.rationalize is None:
        inst = load_instance(args.input)
        plan, run = solve_instance(inst, epsilon, args.mode, args.cap)
        unit = 1.0
    else:
        if args.rationalize < 1:
            raise UsageError("--rationalize must be a positive integer")
        doc = read_instance_file(args.input)
        inst = load_instance(args.input, args.rationalize)
        scaled_plan, run = solve_instance(inst, epsilon * args.rationalize, args.mode, args.cap)
        X = round_feasible_simple(scaled_plan.X / args.rationalize, doc.r, doc.c)
        plan = TransportPlan(X=X, cost=float(np.sum(X * np.asarray(doc.Q, dtype=np.float64))))
        unit = float(args.rationalize)

    if args.output is not None:
        write_model(PlanFile.from_plan(plan), args.output)
    if args.trace is not None:
        write_trace(run.trace, args.trace)

    bound = gap_bound(run.state) if run.state is not None else 0.0
    print(f"cost: {plan.cost:.12g}")
    print(f"iterations: {run.steps}")
    print(f"final_eta: {run.final_eta:.6g}")
    print(f"gap_bound: {bound * inst.mu / unit:.6g}")
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    if args.plan is None and not args.self_check:
        raise UsageError("verify needs a plan file or --self")
    inst = load_instance(args.input)
    opt, _ = exact_ot(inst)

    if args.self_check:
        plan, _ = solve_instance(inst, args.epsilon)
        X, reported = plan.X, None
    else:
        doc = read_plan_file(args.plan)
        X, reported = doc.matrix(), float(doc.cost)

    failures = check_plan(X, inst, opt, args.epsilon, reported)
    if failures:
        raise VerificationFailed(failures)
    print(f"PASS cost {inst.cost(X):.12g} OPT {opt:.12g}")
    return 0


def check_generator_flags(args: argparse.Namespace) -> None:
    for flag in ("n", "m", "cost_max", "marg_max"):
        if getattr(args, flag) < 1:
            raise UsageError(f"--{flag.replace('_', '-')} must be positive")
    if max(args.n, args.m) > min(args.n, args.m) * args.marg_max:
        raise UsageError(
            f"--marg-max {args.marg_max} cannot balance a {args.n}x{args.m} instance"
        )


def cmd_gen(args: argparse.Namespace) -> int:
    check_generator_flags(args)
    inst = generate_instance(args.n, args.m, args.cost_max, args.marg_max, args.seed)
    write_model(InstanceFile.from_instance(inst), args.output)
    return 0


@dataclass(frozen=True)
class BenchCell:
    mode: str
    epsilon: float
    seed: int
    iterations: int | None = None
    cost_gap: float | None = None
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None


def run_cell(
    mode: str, epsilon: float, seed: int, inst: TransportInstance, opt: float, cap: int | None
) -> BenchCell:
    try:
        plan, run = solve_instance(inst, epsilon, mode, cap)
    except SolverError as e:
        logger.warning(
            "Benchmark cell failed",
            extra={
                "solver_data": {"mode": mode, "epsilon": epsilon, "seed": seed, "error": str(e)}
            },
        )
        return BenchCell(mode, epsilon, seed, error=str(e))
    return BenchCell(mode, epsilon, seed, iterations=run.steps, cost_gap=plan.cost - opt)


def summarize(cells: list[BenchCell]) -> list[ReportRow]:
    groups: dict[tuple[str, float], list[BenchCell]] = defaultdict(list)
    for cell in cells:
        groups[cell.mode, cell.epsilon].append(cell)
    rows = []
    for (mode, epsilon), group in sorted(groups.items(), key=lambda kv: (kv[0][0], -kv[0][1])):
        ok = [cell for cell in group if not cell.failed]
        rows.append(
            ReportRow(
                mode=mode,
                epsilon=epsilon,
                cells=len(group),
                failures=len(group) - len(ok),
                median_iterations=statistics.median(c.iterations for c in ok) if ok else math.nan,
                median_cost_gap=statistics.median(c.cost_gap for c in ok) if ok else math.nan,
            )
        )
    return rows


def log_fit(epsilons: list[float], iterations: list[float]) -> tuple[float, float]:
    """Least-squares slope of iterations against log(1/eps) and its R^2."""
    x = np.log(1.0 / np.asarray(epsilons))
    y = np.asarray(iterations, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    residual = float(np.sum((y - (slope * x + intercept)) ** 2))
    total = float(np.sum((y - y.mean()) ** 2))
    r_squared = 1.0 - residual / total if total > 0 else 1.0
    return float(slope), r_squared


def cmd_bench(args: argparse.Namespace) -> int:
    if args.instance is not None:
        shared = load_instance(args.instance)
        instances = {seed: shared for seed in args.seeds}
    else:
        check_generator_flags(args)
        instances = {
            seed: generate_instance(args.n, args.m, args.cost_max, args.marg_max, seed)
            for seed in args.seeds
        }
    optima = {seed: exact_ot(inst)[0] for seed, inst in instances.items()}

    jobs = [
        (mode, epsilon, seed)
        for mode in args.modes
        for epsilon in args.eps_list
        for seed in args.seeds
    ]
    with ThreadPoolExecutor(max_workers=args.workers) as pool:
        futures = [
            pool.submit(run_cell, mode, eps, seed, instances[seed], optima[seed], args.cap)
            for mode, eps, seed in jobs
        ]
        cells = sorted(
            (future.result() for future in futures), key=lambda c: (c.mode, c.epsilon, c.seed)
        )

    rows = summarize(cells)
    if args.output is not None:
        write_report(rows, args.output)
    for row in rows:
        print(
            f"{row.mode:<12} eps={row.epsilon:<8g} cells={row.cells} failures={row.failures} "
            f"median_iterations={row.median_iterations:g} median_cost_gap={row.median_cost_gap:.3g}"
        )

    fitted = [
        row for row in rows if row.mode == "expsinkhorn" and not math.isnan(row.median_iterations)
    ]
    if len({row.epsilon for row in fitted}) >= 2:
        slope, r_squared = log_fit(
            [row.epsilon for row in fitted], [row.median_iterations for row in fitted]
        )
        print(f"expsinkhorn slope per log(1/eps): {slope:.4g}  R^2: {r_squared:.4f}")

    if all(cell.failed for cell in cells):
        raise SolverError("Every benchmark cell failed")
    return 0


def cmd_mcc_solve(args: argparse.Namespace) -> int:
    mcc = parse_dimacs(read_text(args.input), source=str(args.input))
    circulation = solve_mcc(mcc, args.epsilon)
    text = format_circulation(circulation, mcc)
    if args.output is not None:
        Path(args.output).write_text(text, encoding="utf-8")
    print(f"cost: {int(round(circulation.cost))}")
    return 0


def cmd_mcc_reduce(args: argparse.Namespace) -> int:
    mcc = parse_dimacs(read_text(args.input), source=str(args.input))
    if args.prune:
        mcc = prune_uncirculating(mcc).instance
    inst, _ = mcc_to_ot(mcc)
    write_model(InstanceFile.from_instance(inst), args.output)
    print(f"reduced: {inst.n} rows, {inst.m} columns, big-M {mcc.big_m}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def positive_float(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return value


def positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return value


def nonnegative_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be a non-negative integer, got {text}")
    return value


class _ArgumentParser(argparse.ArgumentParser):
    """Reports bad flags as UsageError (exit 1) instead of exiting with status 2."""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(
        prog="expsinkhorn",
        description="High-accuracy optimal transport with regularization-doubling Sinkhorn.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument(
        "--log-level",
        default=settings.log_level,
        help=f"Log level for stderr JSON logs (default: {settings.log_level})",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    solve = commands.add_parser("solve", help="Solve an instance file")
    solve.add_argument("input", type=Path)
    solve.add_argument("--epsilon", type=positive_float, default=settings.default_epsilon)
    solve.add_argument("--mode", choices=MODES, default="expsinkhorn")
    solve.add_argument("--output", type=Path, help="Write the plan here")
    solve.add_argument("--trace", type=Path, help="Write the step trace (CSV) here")
    solve.add_argument("--cap", type=positive_int, help="Override the safety cap on steps")
    solve.add_argument(
        "--rationalize",
        type=int,
        metavar="DEN",
        help="Round fractional marginals to multiples of 1/DEN before solving",
    )
    solve.set_defaults(handler=cmd_solve)

    verify = commands.add_parser("verify", help="Check a plan against the exact optimum")
    verify.add_argument("input", type=Path)
    verify.add_argument("plan", type=Path, nargs="?")
    verify.add_argument("--self", dest="self_check", action="store_true", help="Solve, then check")
    verify.add_argument("--epsilon", type=positive_float, default=settings.default_epsilon)
    verify.set_defaults(handler=cmd_verify)

    gen = commands.add_parser("gen", help="Generate a random integral instance")
    gen.add_argument("--n", type=int, required=True)
    gen.add_argument("--m", type=int, required=True)
    gen.add_argument("--cost-max", type=int, default=10)
    gen.add_argument("--marg-max", type=int, default=10)
    gen.add_argument("--seed", type=nonnegative_int, default=0)
    gen.add_argument("output", type=Path)
    gen.set_defaults(handler=cmd_gen)

    bench = commands.add_parser("bench", help="Sweep accuracies, modes and seeds")
    bench.add_argument("--eps-list", type=positive_float, nargs="+", required=True)
    bench.add_argument("--modes", choices=MODES, nargs="+", default=["expsinkhorn"])
    bench.add_argument("--seeds", type=nonnegative_int, nargs="+", default=[0])
    bench.add_argument("--instance", type=Path, help="Use this instance for every seed")
    bench.add_argument("--n", type=int, default=5)
    bench.add_argument("--m", type=int, default=5)
    bench.add_argument("--cost-max", type=int, default=10)
    bench.add_argument("--marg-max", type=int, default=10)
    bench.add_argument("--cap", type=positive_int, help="Safety cap on steps for every cell")
    bench.add_argument("--workers", type=positive_int, default=settings.bench_workers)
    bench.add_argument("--output", type=Path, help="Write the report (CSV) here")
    bench.set_defaults(handler=cmd_bench)

    mcc = commands.add_parser("mcc", help="Minimum-cost circulation via the OT reduction")
    mcc_commands = mcc.add_subparsers(dest="mcc_command", required=True)

    mcc_solve = mcc_commands.add_parser("solve", help="Solve a DIMACS-like MCC file")
    mcc_solve.add_argument("input", type=Path)
    mcc_solve.add_argument("--output", type=Path, help="Write the circulation here")
    mcc_solve.add_argument(
        "--epsilon", type=positive_float, help="OT accuracy (default 1/(4|E|UC))"
    )
    mcc_solve.set_defaults(handler=cmd_mcc_solve)

    mcc_reduce = mcc_commands.add_parser("reduce", help="Write the reduced OT instance")
    mcc_reduce.add_argument("input", type=Path)
    mcc_reduce.add_argument("output", type=Path)
    mcc_reduce.add_argument(
        "--prune", action="store_true", help="Drop vertices that cannot carry flow first"
    )
    mcc_reduce.set_defaults(handler=cmd_mcc_reduce)

    return parser


def main(argv: list[str] | None = None) -> int:
    configure_logging(settings.log_level)
    try:
        args = build_parser().parse_args(argv)
        configure_logging(args.log_level)
        return args.handler(args)
    except SolverError as e:
        logger.error(
            "Command failed",
            extra={"solver_data": {"error": type(e).__name__, "exit_code": e.exit_code}},
        )
        print(f"error: {e.message}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
