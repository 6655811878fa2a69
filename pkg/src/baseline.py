"""
Plain Sinkhorn with a fixed regularization eta = log(n) / eps.

This is the comparison point for ExpSinkhorn: the same log-domain state,
trace format and dual bookkeeping, but eta never changes. Rows and columns
are rescaled alternately until the combined l1 marginal error drops to
1/(2 mu). At small eps the implied matrix is close to a vertex of the
transport polytope and progress per step becomes tiny, which is exactly the
slowdown the doubling schedule avoids; hitting the cap is expected there.
"""

import logging

from src.config import settings
from src.core import (
    IterationTrace,
    StepKind,
    TraceRecord,
    TransportInstance,
    initial_state,
    log_n_mu,
)
from src.errors import IterationCapExceeded
from src.sinkhorn import (
    SinkhornRun,
    apply_col_rescale,
    apply_row_rescale,
    col_log_sums,
    dual_value,
    finish_with_row_rescale,
    l1_error,
    make_record,
    output_matrix,
    row_log_sums,
    zero_cost_run,
)

logger = logging.getLogger("expsinkhorn.baseline")


def plain_eta(inst: TransportInstance, epsilon: float) -> float:
    """log(n) / eps, with log n floored at log 2 for single-row instances."""
    return log_n_mu(inst.n, 1) / epsilon


def run_plain_sinkhorn(
    inst: TransportInstance, epsilon: float, limits: int | None = None
) -> SinkhornRun:
    """
    Fixed-eta Sinkhorn until ||a - r_s||_1 + ||b - c_s||_1 <= 1/(2 mu).

    The duals start at alpha = beta = -||Q||_inf, so every implied entry is
    at most 1 for any eta > 0. The returned matrix gets a final exact row
    rescale and is therefore accepted by repair_plan.

    Raises:
        IterationCapExceeded: if the cap (default settings.plain_iteration_cap)
            is reached before the stopping rule holds
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if inst.q_max == 0.0:
        return zero_cost_run(inst)

    cap = settings.plain_iteration_cap if limits is None else limits
    state = initial_state(inst, eta=plain_eta(inst, epsilon))
    records: list[TraceRecord] = []
    rows_next = True

    while True:
        log_a = row_log_sums(state, inst)
        log_b = col_log_sums(state, inst)
        l1_row = l1_error(log_a, state.r_s)
        l1_col = l1_error(log_b, state.c_s)

        if l1_row + l1_col <= state.threshold:
            records.append(
                make_record(len(records), state, StepKind.STOP, l1_row, l1_col, dual_value(state))
            )
            break
        if len(records) >= cap:
            raise IterationCapExceeded(
                f"Plain Sinkhorn exceeded {cap} steps (eta={state.eta:.6g})", steps=len(records)
            )

        if rows_next:
            outcome = apply_row_rescale(state, log_a, l1_row, l1_col)
        else:
            outcome = apply_col_rescale(state, log_b, l1_row, l1_col)
        rows_next = not rows_next

        records.append(
            make_record(
                len(records), state, outcome.kind, l1_row, l1_col, dual_value(outcome.state)
            )
        )
        state = outcome.state

    state = finish_with_row_rescale(state, inst, records)

    logger.info(
        "Plain Sinkhorn finished",
        extra={"solver_data": {"epsilon": epsilon, "steps": len(records), "eta": state.eta}},
    )
    return SinkhornRun(
        x=output_matrix(state, inst),
        state=state,
        trace=IterationTrace(tuple(records)),
    )
