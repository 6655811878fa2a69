"""
Turning an approximately scaled matrix into an exactly feasible plan.

After the scaling loop, X has exact row sums r_s and column sums within
1/(2 mu) of c_s in l1. Because mu r_s and mu c_s are integral, a weighted
Hall argument shows that X contains a sub-plan carrying exactly half of
every marginal:

    0 <= X_hat <= X,   X_hat 1 = r_s / 2,   X_hat^T 1 = c_s / 2

X_hat is found with one max-flow computation on the bipartite network

    source --(mu r_s,i / 2)--> row i --(mu X_ij)--> col j --(mu c_s,j / 2)--> sink

and Y = 2 mu X_hat is feasible for the original marginals. Its cost exceeds
the optimum by at most 2 eta^-1 ||r_s||_1 log(n mu) in scaled units.

round_feasible_simple is the generic fallback (scale down rows and columns
that overshoot, then add a rank-one correction); repair_plan also uses it to
absorb the floating-point residual of Y.
"""

import logging
from collections import deque
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike

from src.core import (
    FLOW_EPS,
    SUPPORT_EPS,
    TransportInstance,
    TransportPlan,
    scale_instance,
)
from src.errors import InfeasibleExtraction, PreconditionViolated

logger = logging.getLogger("expsinkhorn.repair")

# Exact-row and integrality checks on solver output tolerate this much
# floating error (the exponent rounding grows with eta).
_INPUT_TOL = 1e-6

# Relative shortfall of the half flow that still counts as saturating.
_SHORTFALL_TOL = 1e-6


@dataclass(frozen=True)
class FlowNetwork:
    """
    Bipartite source/sink network used by the repair step.

    Nodes are numbered 0 = source, 1..n = rows, n+1..n+m = columns,
    n+m+1 = sink.

    Attributes:
        row_caps: Capacity of source -> row i
        arc_caps: Capacity of row i -> col j (0 means no arc)
        col_caps: Capacity of col j -> sink
    """

    row_caps: np.ndarray
    arc_caps: np.ndarray
    col_caps: np.ndarray

    def __post_init__(self) -> None:
        for name in ("row_caps", "arc_caps", "col_caps"):
            caps = np.array(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(caps)) or np.any(caps < 0):
                raise PreconditionViolated(f"Network {name} must be finite and nonnegative")
            caps.setflags(write=False)
            object.__setattr__(self, name, caps)
        if self.arc_caps.shape != (self.row_caps.shape[0], self.col_caps.shape[0]):
            raise PreconditionViolated(
                f"Arc capacity shape {self.arc_caps.shape} does not match "
                f"{self.row_caps.shape[0]} rows and {self.col_caps.shape[0]} columns"
            )

    @property
    def n(self) -> int:
        return self.row_caps.shape[0]

    @property
    def m(self) -> int:
        return self.col_caps.shape[0]

    @property
    def source_capacity(self) -> float:
        return float(self.row_caps.sum())


def repair_network(
    X: np.ndarray, r_s: np.ndarray, c_s: np.ndarray, mu: int, fraction: float = 1.0
) -> FlowNetwork:
    """Build the network for a scaled matrix; terminal arcs carry `fraction` of mu r_s, mu c_s."""
    arcs = np.where(X > SUPPORT_EPS, mu * X, 0.0)
    return FlowNetwork(row_caps=fraction * mu * r_s, arc_caps=arcs, col_caps=fraction * mu * c_s)


@dataclass(frozen=True)
class FlowResult:
    value: float
    arc_flow: np.ndarray


class _Dinic:
    """Blocking-flow max flow on a residual graph with paired arcs (e, e ^ 1)."""

    def __init__(self, node_count: int, eps: float):
        self.adj: list[list[int]] = [[] for _ in range(node_count)]
        self.head: list[int] = []
        self.residual: list[float] = []
        self.eps = eps

    def add_arc(self, u: int, v: int, cap: float) -> int:
        idx = len(self.head)
        self.head += [v, u]
        self.residual += [cap, 0.0]
        self.adj[u].append(idx)
        self.adj[v].append(idx + 1)
        return idx

    def flow_on(self, idx: int) -> float:
        return self.residual[idx ^ 1]

    def _levels(self, source: int, sink: int) -> list[int] | None:
        level = [-1] * len(self.adj)
        level[source] = 0
        queue = deque([source])
        while queue:
            u = queue.popleft()
            for e in self.adj[u]:
                v = self.head[e]
                if level[v] < 0 and self.residual[e] > self.eps:
                    level[v] = level[u] + 1
                    queue.append(v)
        return level if level[sink] >= 0 else None

    def _push(self, u: int, sink: int, limit: float, level: list[int], cursor: list[int]) -> float:
        if u == sink:
            return limit
        while cursor[u] < len(self.adj[u]):
            e = self.adj[u][cursor[u]]
            v = self.head[e]
            if self.residual[e] > self.eps and level[v] == level[u] + 1:
                pushed = self._push(v, sink, min(limit, self.residual[e]), level, cursor)
                if pushed > 0.0:
                    self.residual[e] -= pushed
                    self.residual[e ^ 1] += pushed
                    return pushed
            cursor[u] += 1
        return 0.0

    def run(self, source: int, sink: int) -> float:
        total = 0.0
        while (level := self._levels(source, sink)) is not None:
            cursor = [0] * len(self.adj)
            while (pushed := self._push(source, sink, float("inf"), level, cursor)) > 0.0:
                total += pushed
        return total


def max_flow(net: FlowNetwork) -> FlowResult:
    """
    Maximum source-to-sink flow with Dinic's blocking-flow algorithm.

    Capacities are real; residual capacity at or below FLOW_EPS times the
    largest capacity counts as saturated, which is what terminates the
    augmentation on non-integral input.
    """
    n, m = net.n, net.m
    source, sink = 0, n + m + 1
    scale = max(1.0, float(net.row_caps.max(initial=0.0)), float(net.col_caps.max(initial=0.0)))
    dinic = _Dinic(n + m + 2, eps=FLOW_EPS * scale)

    for i in range(n):
        if net.row_caps[i] > 0:
            dinic.add_arc(source, 1 + i, float(net.row_caps[i]))
    arc_ids = {}
    for i, j in zip(*np.nonzero(net.arc_caps > 0)):
        arc_ids[i, j] = dinic.add_arc(1 + i, 1 + n + j, float(net.arc_caps[i, j]))
    for j in range(m):
        if net.col_caps[j] > 0:
            dinic.add_arc(1 + n + j, sink, float(net.col_caps[j]))

    value = dinic.run(source, sink)

    arc_flow = np.zeros((n, m))
    for (i, j), idx in arc_ids.items():
        arc_flow[i, j] = dinic.flow_on(idx)
    return FlowResult(value=value, arc_flow=arc_flow)


def extract_half_feasible(X: np.ndarray, r_s: np.ndarray, c_s: np.ndarray, mu: int) -> np.ndarray:
    """
    Find 0 <= X_hat <= X with X_hat 1 = r_s / 2 and X_hat^T 1 = c_s / 2.

    Preconditions: X >= 0, X 1 = r_s, ||X^T 1 - c_s||_1 <= 1/(2 mu), and
    mu r_s, mu c_s integral.

    Raises:
        PreconditionViolated: if the preconditions do not hold
        InfeasibleExtraction: if max flow cannot carry half of every marginal
    """
    X = np.asarray(X, dtype=np.float64)
    r_s = np.asarray(r_s, dtype=np.float64)
    c_s = np.asarray(c_s, dtype=np.float64)

    if np.any(X < 0):
        raise PreconditionViolated("Matrix to repair has negative entries")
    row_error = float(np.max(np.abs(X.sum(axis=1) - r_s)))
    if row_error > _INPUT_TOL:
        raise PreconditionViolated(f"Row sums must match r_s exactly, max error {row_error:.3g}")
    col_l1 = float(np.abs(X.sum(axis=0) - c_s).sum())
    if col_l1 > 1.0 / (2.0 * mu) + _INPUT_TOL:
        raise PreconditionViolated(
            f"Column l1 error {col_l1:.6g} exceeds 1/(2 mu) = {1.0 / (2.0 * mu):.6g}"
        )
    for name, vec in (("r_s", r_s), ("c_s", c_s)):
        if np.any(np.abs(mu * vec - np.round(mu * vec)) > _INPUT_TOL):
            raise PreconditionViolated(f"mu * {name} must be integral")

    net = repair_network(X, r_s, c_s, mu, fraction=0.5)
    flow = max_flow(net)
    target = net.source_capacity
    if flow.value < target * (1.0 - _SHORTFALL_TOL) - FLOW_EPS:
        raise InfeasibleExtraction(
            f"Max flow {flow.value:.12g} does not saturate half the demand {target:.12g}"
        )

    return np.clip(flow.arc_flow / mu, 0.0, X)


def round_feasible_simple(X: ArrayLike, r: ArrayLike, c: ArrayLike) -> np.ndarray:
    """
    Project a nonnegative matrix onto the transport polytope U(r, c).

    Rows above r are scaled down to r, then columns above c to c; what is
    still missing is added back as the rank-one matrix err_r err_c^T / ||err_r||_1.
    A matrix that already has the right marginals comes back unchanged.
    """
    X = np.maximum(np.array(X, dtype=np.float64), 0.0)
    r = np.asarray(r, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)

    rows = X.sum(axis=1)
    shrink = np.divide(r, rows, out=np.ones_like(rows), where=rows > r)
    X *= shrink[:, None]

    cols = X.sum(axis=0)
    shrink = np.divide(c, cols, out=np.ones_like(cols), where=cols > c)
    X *= shrink[None, :]

    err_r = np.maximum(r - X.sum(axis=1), 0.0)
    err_c = np.maximum(c - X.sum(axis=0), 0.0)
    missing = err_r.sum()
    if missing <= 0.0:
        return X
    return X + np.outer(err_r, err_c) / missing


def repair_plan(X: np.ndarray, inst: TransportInstance) -> TransportPlan:
    """
    Repair the scaled-back output of a scaling run into an exactly feasible plan.

    Y = 2 mu X_hat with X_hat from extract_half_feasible on X / mu; the
    floating residual of Y is absorbed by round_feasible_simple.

    Raises:
        PreconditionViolated, InfeasibleExtraction
    """
    r_s, c_s, mu = scale_instance(inst)
    X_hat = extract_half_feasible(np.asarray(X) / mu, r_s, c_s, mu)
    Y = round_feasible_simple(2.0 * mu * X_hat, inst.r, inst.c)

    plan = TransportPlan.from_matrix(Y, inst)
    logger.debug(
        "Plan repaired",
        extra={"solver_data": {"cost": plan.cost, "support": int(np.count_nonzero(Y))}},
    )
    return plan


def check_weighted_hall(support: np.ndarray, demand: ArrayLike, supply: ArrayLike) -> bool:
    """
    Exhaustively check sum_{s in S} demand_s <= sum_{t in N(S)} supply_t.

    `support` is a boolean n x m matrix; N(S) is the set of columns adjacent
    to S. Exponential in n, intended for n <= 12.
    """
    support = np.asarray(support, dtype=bool)
    demand = np.asarray(demand, dtype=np.float64)
    supply = np.asarray(supply, dtype=np.float64)
    n = support.shape[0]

    for mask in range(1, 1 << n):
        members = np.array([(mask >> i) & 1 for i in range(n)], dtype=bool)
        neighbours = support[members].any(axis=0)
        if demand[members].sum() > supply[neighbours].sum() + 1e-9:
            return False
    return True
