"""
ExpSinkhorn: Sinkhorn matrix scaling with regularization doubling.

The engine keeps only the dual state (eta, alpha, beta). Row and column sums
of the implied matrix X_ij = exp(eta (alpha_i + beta_j - Q_ij)) are computed
in the log domain with scipy's logsumexp, so entries far below the float
range never cause trouble at the large final eta.

One step of the loop, with threshold 1 / (2 mu) on scaled marginals:

    1. if ||a - r_s||_1 > 1/(2 mu):      rescale rows     (alpha moves)
    2. elif ||b - c_s||_1 > 1/(2 mu):    rescale columns  (beta moves)
    3. else:                             double eta       (X -> X^2)

The run stops at the balance point where doubling would push eta past
4 mu eps^-1 ||r_s||_1 log(n mu). At that point the duality gap is at most
2 eta^-1 ||r_s||_1 log(n mu) <= eps / mu. A last row rescale (alternating
with column rescales if the columns drift) makes the row sums exact, and the
matrix is handed to the repair step.

Every rescale raises the dual value D = <r_s, alpha> + <c_s, beta>; the
trace records D, the l1 errors and the gap bound for each step so the
convergence guarantees can be checked after the fact.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from src.config import settings
from src.core import (
    IterationTrace,
    ScalingState,
    StepKind,
    TraceRecord,
    TransportInstance,
    initial_state,
    log_n_mu,
    northwest_corner,
    scale_instance,
)
from src.errors import IterationCapExceeded, NumericUnderflow, PreconditionViolated

logger = logging.getLogger("expsinkhorn.sinkhorn")


# ---------------------------------------------------------------------------
# Log-domain marginals
# ---------------------------------------------------------------------------


def _log_sums(exponents: np.ndarray, axis: int, label: str) -> np.ndarray:
    # Peaks far below the float range are fine in the log domain (the fixed-eta
    # baseline starts there); only a non-finite peak means the duals broke.
    peak = exponents.max(axis=axis)
    if not np.all(np.isfinite(peak)):
        raise NumericUnderflow(f"{label} exponent peak {float(np.min(peak)):.3g} is not finite")
    return logsumexp(exponents, axis=axis)


def row_log_sums(state: ScalingState, inst: TransportInstance) -> np.ndarray:
    """log a_i = log sum_j exp(eta (alpha_i + beta_j - Q_ij))."""
    return _log_sums(state.exponents(inst.Q), axis=1, label="Row")


def col_log_sums(state: ScalingState, inst: TransportInstance) -> np.ndarray:
    """log b_j = log sum_i exp(eta (alpha_i + beta_j - Q_ij))."""
    return _log_sums(state.exponents(inst.Q), axis=0, label="Column")


def row_sums_log(state: ScalingState, inst: TransportInstance) -> np.ndarray:
    """
    Row sums a of the implied matrix, computed through row_log_sums.

    Raises:
        NumericUnderflow: only when a row's exponent peak is not finite.
            Peaks far below log of the smallest positive float are still
            summed exactly in the log domain, so they do not raise.
    """
    return np.exp(row_log_sums(state, inst))


def col_sums_log(state: ScalingState, inst: TransportInstance) -> np.ndarray:
    """Column sums b of the implied matrix, computed through col_log_sums."""
    return np.exp(col_log_sums(state, inst))


def exact_row_log_matrix(state: ScalingState, inst: TransportInstance) -> np.ndarray:
    """
    log X after a closed-form row rescale: each row normalized by its own
    logsumexp and shifted to log r_s.

    Rows come out exact to one rounding per entry, however large the
    absolute rounding in eta * alpha is.
    """
    E = state.exponents(inst.Q)
    return E - _log_sums(E, axis=1, label="Row")[:, None] + np.log(state.r_s)[:, None]


def output_matrix(state: ScalingState, inst: TransportInstance) -> np.ndarray:
    """Exact-row implied matrix in original units, as repair_plan expects it."""
    return state.mu * np.exp(exact_row_log_matrix(state, inst))


# ---------------------------------------------------------------------------
# Dual quantities
# ---------------------------------------------------------------------------


def dual_value(state: ScalingState) -> float:
    """D = sum_i r_s,i alpha_i + sum_j c_s,j beta_j."""
    return float(state.r_s @ state.alpha + state.c_s @ state.beta)


def gap_bound(state: ScalingState) -> float:
    """Bound on OPT - D at a balance point: 2 eta^-1 ||r_s||_1 log(n mu)."""
    return 2.0 / state.eta * state.mass * state.log_n_mu


def dual_increase_lower_bound(a: np.ndarray, r_s: np.ndarray, eta: float, mu: int) -> float:
    """
    Guaranteed dual gain of a row rescale:

        eta^-1 / 10 * min(1/mu, ||a - r_s||_1^2 / ||r_s||_1)
    """
    l1 = float(np.abs(a - r_s).sum())
    return (1.0 / eta) / 10.0 * min(1.0 / mu, l1 * l1 / float(r_s.sum()))


# ---------------------------------------------------------------------------
# Steps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StepOutcome:
    """
    Result of one engine step.

    Attributes:
        kind: Which branch ran
        state: State after the step
        dual_delta: Change in the dual value caused by the step
        l1_row: ||a - r_s||_1 before the step
        l1_col: ||b - c_s||_1 before the step
    """

    kind: StepKind
    state: ScalingState
    dual_delta: float
    l1_row: float
    l1_col: float


def apply_row_rescale(
    state: ScalingState, log_a: np.ndarray, l1_row: float, l1_col: float
) -> StepOutcome:
    shift = (log_a - np.log(state.r_s)) / state.eta
    return StepOutcome(
        kind=StepKind.ROW,
        state=state.evolve(alpha=state.alpha - shift),
        dual_delta=-float(state.r_s @ shift),
        l1_row=l1_row,
        l1_col=l1_col,
    )


def apply_col_rescale(
    state: ScalingState, log_b: np.ndarray, l1_row: float, l1_col: float
) -> StepOutcome:
    shift = (log_b - np.log(state.c_s)) / state.eta
    return StepOutcome(
        kind=StepKind.COL,
        state=state.evolve(beta=state.beta - shift),
        dual_delta=-float(state.c_s @ shift),
        l1_row=l1_row,
        l1_col=l1_col,
    )


def l1_error(log_sums: np.ndarray, target: np.ndarray) -> float:
    return float(np.abs(np.exp(log_sums) - target).sum())


def row_rescale(
    state: ScalingState, inst: TransportInstance, *, enforce_threshold: bool = True
) -> StepOutcome:
    """
    Rescale rows to their targets: alpha_i -= eta^-1 log(a_i / r_s,i).

    Afterwards the row sums equal r_s and beta is untouched. The engine only
    calls this when ||a - r_s||_1 > 1/(2 mu); pass enforce_threshold=False
    for the fixed-eta baseline and the final exact-row step.

    Raises:
        PreconditionViolated: if the row error does not exceed the threshold
    """
    log_a = row_log_sums(state, inst)
    l1_row = l1_error(log_a, state.r_s)
    l1_col = l1_error(col_log_sums(state, inst), state.c_s)
    if enforce_threshold and not l1_row > state.threshold:
        raise PreconditionViolated(
            f"Row rescale needs l1 error > {state.threshold:.6g}, got {l1_row:.6g}"
        )
    return apply_row_rescale(state, log_a, l1_row, l1_col)


def col_rescale(
    state: ScalingState, inst: TransportInstance, *, enforce_threshold: bool = True
) -> StepOutcome:
    """
    Rescale columns to their targets: beta_j -= eta^-1 log(b_j / c_s,j).

    Raises:
        PreconditionViolated: if rows are not balanced or the column error
            does not exceed the threshold
    """
    l1_row = l1_error(row_log_sums(state, inst), state.r_s)
    log_b = col_log_sums(state, inst)
    l1_col = l1_error(log_b, state.c_s)
    if enforce_threshold and (l1_row > state.threshold or not l1_col > state.threshold):
        raise PreconditionViolated(
            f"Column rescale needs row error <= {state.threshold:.6g} < column error, "
            f"got row {l1_row:.6g}, column {l1_col:.6g}"
        )
    return apply_col_rescale(state, log_b, l1_row, l1_col)


def double_eta(state: ScalingState) -> ScalingState:
    """eta <- 2 eta with the duals unchanged, so every implied entry squares."""
    return state.evolve(eta=2.0 * state.eta)


# ---------------------------------------------------------------------------
# Iteration bound
# ---------------------------------------------------------------------------


def eta_ceiling(inst: TransportInstance, epsilon: float) -> float:
    """The loop runs while eta <= 4 mu eps^-1 ||r_s||_1 log(n mu)."""
    r_s, _, mu = scale_instance(inst)
    return 4.0 * mu / epsilon * float(r_s.sum()) * log_n_mu(inst.n, mu)


def iteration_bound(inst: TransportInstance, epsilon: float) -> float:
    """
    Explicit step bound with the constants of the convergence proof.

    The first phase closes an initial gap of at most 3 ||Q|| ||r_s||_1 with
    steps worth at least eta^-1 / (40 mu^2 ||r_s||_1) each; every later phase
    starts with gap <= 4 eta^-1 ||r_s||_1 log(n mu).
    """
    r_s, _, mu = scale_instance(inst)
    scaled_mass = mu * float(r_s.sum())
    log_term = log_n_mu(inst.n, mu)
    eta0 = 10.0 / inst.q_max * log_term
    phases = math.ceil(math.log2(max(1.0, eta_ceiling(inst, epsilon) / eta0))) + 1
    return scaled_mass**2 * log_term * (1200 + 160 * phases) + phases + 2


def default_iteration_cap(inst: TransportInstance, epsilon: float) -> int:
    return math.ceil(settings.cap_factor * iteration_bound(inst, epsilon))


# ---------------------------------------------------------------------------
# Engine
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SinkhornRun:
    """
    Output of a scaling run.

    Attributes:
        x: Implied matrix scaled back to original units (rows exact, columns
           approximate); feed it to repair_plan
        state: Final dual state, or None when the cost matrix is zero
        trace: Every step taken
    """

    x: np.ndarray
    state: ScalingState | None
    trace: IterationTrace

    @property
    def steps(self) -> int:
        return self.trace.steps

    @property
    def final_eta(self) -> float:
        return self.state.eta if self.state is not None else math.inf


def make_record(
    step: int, state: ScalingState, kind: StepKind, l1_row: float, l1_col: float, dual: float
) -> TraceRecord:
    return TraceRecord(
        step=step,
        eta=state.eta,
        op=kind,
        l1_row=l1_row,
        l1_col=l1_col,
        dual=dual,
        gap_bound=gap_bound(state),
    )


def finish_with_row_rescale(
    state: ScalingState,
    inst: TransportInstance,
    records: list[TraceRecord],
    cap: int | None = None,
) -> ScalingState:
    """
    Make the row sums exact, appending each step taken to `records`.

    A row rescale moves the column l1 error by at most the row error it
    removes. Straight after a doubling neither marginal is exact, so the
    columns can land past 1/(2 mu); column and row rescales then alternate
    at the same eta until the columns are back within the threshold. The
    returned state always comes out of a row rescale.

    Raises:
        IterationCapExceeded: if the run's step count reaches `cap`
    """
    rescale = row_rescale
    while True:
        outcome = rescale(state, inst, enforce_threshold=False)
        records.append(
            make_record(
                len(records), state, outcome.kind, outcome.l1_row, outcome.l1_col,
                dual_value(outcome.state),
            )
        )
        state = outcome.state
        if rescale is row_rescale:
            exact_log_cols = logsumexp(exact_row_log_matrix(state, inst), axis=0)
            if l1_error(exact_log_cols, state.c_s) <= state.threshold:
                return state
            rescale = col_rescale
        else:
            rescale = row_rescale

        steps = sum(1 for rec in records if rec.op != StepKind.STOP)
        if cap is not None and steps >= cap:
            raise IterationCapExceeded(
                f"Final rescaling exceeded {cap} steps (eta={state.eta:.6g})", steps=steps
            )


def zero_cost_run(inst: TransportInstance) -> SinkhornRun:
    """With Q == 0 every feasible plan is optimal; return the northwest corner."""
    logger.info(
        "Zero cost matrix, returning northwest-corner plan",
        extra={"solver_data": {"n": inst.n, "m": inst.m}},
    )
    return SinkhornRun(x=northwest_corner(inst.r, inst.c), state=None, trace=IterationTrace())


def run_expsinkhorn(
    inst: TransportInstance, epsilon: float, limits: int | None = None
) -> SinkhornRun:
    """
    Run ExpSinkhorn to additive error epsilon (original units).

    Args:
        inst: Validated instance
        epsilon: Target additive error, > 0
        limits: Safety cap on total steps; defaults to default_iteration_cap()

    Returns:
        SinkhornRun whose x has exact row sums r and column l1 error at most
        1/2 in original units, ready for repair_plan

    Raises:
        IterationCapExceeded: if the step count passes the cap
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if inst.q_max == 0.0:
        return zero_cost_run(inst)

    cap = default_iteration_cap(inst, epsilon) if limits is None else limits
    ceiling = eta_ceiling(inst, epsilon)
    state = initial_state(inst)
    records: list[TraceRecord] = []
    steps = 0

    while True:
        log_a = row_log_sums(state, inst)
        log_b = col_log_sums(state, inst)
        l1_row = l1_error(log_a, state.r_s)
        l1_col = l1_error(log_b, state.c_s)

        if l1_row > state.threshold:
            outcome = apply_row_rescale(state, log_a, l1_row, l1_col)
        elif l1_col > state.threshold:
            outcome = apply_col_rescale(state, log_b, l1_row, l1_col)
        elif 2.0 * state.eta > ceiling:
            records.append(
                make_record(len(records), state, StepKind.STOP, l1_row, l1_col, dual_value(state))
            )
            break
        else:
            records.append(
                make_record(
                    len(records), state, StepKind.DOUBLE, l1_row, l1_col, dual_value(state)
                )
            )
            logger.debug(
                "Regularization doubled",
                extra={"solver_data": {"step": steps, "eta": 2.0 * state.eta}},
            )
            state = double_eta(state)
            steps += 1
            continue

        records.append(
            make_record(
                len(records), state, outcome.kind, l1_row, l1_col, dual_value(outcome.state)
            )
        )
        state = outcome.state
        steps += 1
        if steps >= cap:
            raise IterationCapExceeded(
                f"ExpSinkhorn exceeded {cap} steps (eta={state.eta:.6g})", steps=steps
            )

    state = finish_with_row_rescale(state, inst, records, cap=cap)
    x = output_matrix(state, inst)
    trace = IterationTrace(tuple(records))

    logger.info(
        "ExpSinkhorn finished",
        extra={
            "solver_data": {
                "n": inst.n,
                "m": inst.m,
                "epsilon": epsilon,
                "steps": trace.steps,
                "eta": state.eta,
                "gap_bound": gap_bound(state),
            }
        },
    )
    return SinkhornRun(x=x, state=state, trace=trace)


# ---------------------------------------------------------------------------
# Runtime invariant check
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InvariantReport:
    """
    Measured invariants of a state.

    Attributes:
        dual_slack: max_ij (alpha_i + beta_j - Q_ij), should be <= 0
        mass_excess: sum_ij X_ij - ||r_s||_1, should be <= 0
        max_entry: max_ij X_ij, should be <= 1
    """

    dual_slack: float
    mass_excess: float
    max_entry: float

    def holds(self, dual_tol: float, mass_tol: float) -> bool:
        return (
            self.dual_slack <= dual_tol
            and self.mass_excess <= mass_tol
            and self.max_entry <= 1.0 + mass_tol
        )


def rounding_envelope(state: ScalingState, inst: TransportInstance) -> float:
    """Absolute tolerance for sums of implied entries at this state's eta."""
    return 1e-9 + 64.0 * state.eta * max(inst.q_max, 1.0) * 2.0**-52 * state.mass


def check_invariants(state: ScalingState, inst: TransportInstance) -> InvariantReport:
    X = state.implied_matrix(inst.Q)
    return InvariantReport(
        dual_slack=float(np.max(state.alpha[:, None] + state.beta[None, :] - inst.Q)),
        mass_excess=float(X.sum() - state.mass),
        max_entry=float(X.max()),
    )
