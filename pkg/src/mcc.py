"""
Minimum-cost circulation and its two-way reductions to optimal transport.

An instance is a directed multigraph with integer capacities u_e >= 1 and
integer costs c_e. A circulation is a flow 0 <= f <= u with zero net flow at
every vertex; the goal is the one of minimum cost c^T f.

OT -> MCC: starting from an integral northwest-corner plan X0, every pair
(i, j) of the complete bipartite graph gets up to two arcs. The forward arc
i -> j (cost Q_ij, capacity min(r_i, c_j) - X0_ij) adds to X_ij, the reverse
arc j -> i (cost -Q_ij, capacity X0_ij) takes from it. A circulation f then
describes the plan X0 + f_fwd - f_rev.

MCC -> OT: one row per vertex with demand equal to its weighted in-degree,
one column per edge with supply u_e. Routing mass from the tail row of an
edge means flow on it, routing it from the head row means no flow, and every
other row costs the prohibitive |E| U C. The transport cost of the plan built
from a circulation equals the circulation cost exactly.

solve_mcc composes the reduction with ExpSinkhorn at an accuracy below the
integrality gap, repairs the plan, rounds it to an integral one by cancelling
cycles in its fractional support and reads the circulation back.
"""

import logging
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike

from src.core import TransportInstance, TransportPlan, northwest_corner, validate_instance
from src.errors import (
    ConservationViolation,
    InvalidMccInstance,
    IsolatedVertex,
    NonIntegralCost,
)
from src.repair import repair_plan
from src.sinkhorn import run_expsinkhorn

logger = logging.getLogger("expsinkhorn.mcc")

# Largest tolerated net flow at a vertex when reading a circulation from a plan.
CONSERVATION_TOL = 1e-9

# Entries closer than this to an integer count as integral while rounding.
INTEGRAL_TOL = 1e-9


def _frozen_ints(values: ArrayLike) -> np.ndarray:
    array = np.array(values, dtype=np.int64).reshape(-1)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class MccInstance:
    """
    A validated minimum-cost circulation instance (vertices are 0-indexed).

    Build it with validate_mcc(); direct construction skips validation.

    Attributes:
        vertex_count: |V|
        tails: Tail vertex of each edge
        heads: Head vertex of each edge
        capacities: u_e >= 1
        costs: Integer edge costs
    """

    vertex_count: int
    tails: np.ndarray
    heads: np.ndarray
    capacities: np.ndarray
    costs: np.ndarray

    def __post_init__(self) -> None:
        for name in ("tails", "heads", "capacities", "costs"):
            object.__setattr__(self, name, _frozen_ints(getattr(self, name)))

    @property
    def edge_count(self) -> int:
        return self.tails.shape[0]

    @property
    def max_cost(self) -> int:
        """C = max |c_e|, at least 1."""
        return max(1, int(np.abs(self.costs).max(initial=0)))

    @property
    def max_capacity(self) -> int:
        """U = max u_e, at least 1."""
        return max(1, int(self.capacities.max(initial=0)))

    @property
    def big_m(self) -> int:
        """Cost of routing an edge column through an unrelated vertex row, |E| U C."""
        return self.edge_count * self.max_capacity * self.max_cost

    def in_capacity(self) -> np.ndarray:
        """Weighted in-degree sum_{e=(v,u)} u_e of every vertex."""
        return np.bincount(
            self.heads, weights=self.capacities, minlength=self.vertex_count
        ).astype(np.int64)

    def net_flow(self, flow: ArrayLike) -> np.ndarray:
        """Inflow minus outflow at every vertex."""
        flow = np.asarray(flow, dtype=np.float64)
        inflow = np.bincount(self.heads, weights=flow, minlength=self.vertex_count)
        outflow = np.bincount(self.tails, weights=flow, minlength=self.vertex_count)
        return inflow - outflow

    def cost(self, flow: ArrayLike) -> float:
        return float(np.dot(self.costs, np.asarray(flow, dtype=np.float64)))


def validate_mcc(
    vertex_count: int,
    tails: ArrayLike,
    heads: ArrayLike,
    capacities: ArrayLike,
    costs: ArrayLike,
) -> MccInstance:
    """
    Validate raw edge arrays and build an MccInstance.

    Raises:
        InvalidMccInstance: on mismatched lengths, vertex indices out of range,
            self-loops, non-integral values or capacities below 1
    """
    if vertex_count < 0:
        raise InvalidMccInstance(f"Vertex count must be nonnegative, got {vertex_count}")

    arrays = {}
    for name, values in (
        ("tails", tails),
        ("heads", heads),
        ("capacities", capacities),
        ("costs", costs),
    ):
        raw = np.asarray(values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(raw)) or np.any(raw != np.round(raw)):
            raise InvalidMccInstance(f"Edge {name} must be integers, got {raw.tolist()}")
        arrays[name] = raw.astype(np.int64)

    lengths = {name: arr.shape[0] for name, arr in arrays.items()}
    if len(set(lengths.values())) > 1:
        raise InvalidMccInstance(f"Edge arrays differ in length: {lengths}")

    for name in ("tails", "heads"):
        vertices = arrays[name]
        if np.any(vertices < 0) or np.any(vertices >= vertex_count):
            raise InvalidMccInstance(
                f"Edge {name} reference vertices outside 0..{vertex_count - 1}"
            )
    loops = np.flatnonzero(arrays["tails"] == arrays["heads"])
    if loops.size:
        raise InvalidMccInstance(f"Self-loops are not allowed (edge {int(loops[0])})")
    if np.any(arrays["capacities"] < 1):
        raise InvalidMccInstance("Edge capacities must be >= 1")

    return MccInstance(vertex_count=vertex_count, **arrays)


@dataclass(frozen=True)
class Circulation:
    """
    Edge flow of an MCC instance.

    Attributes:
        flow: Per-edge flow f_e
        cost: c^T f
    """

    flow: np.ndarray
    cost: float

    def __post_init__(self) -> None:
        flow = np.array(self.flow, dtype=np.float64)
        flow.setflags(write=False)
        object.__setattr__(self, "flow", flow)

    @classmethod
    def from_flow(cls, flow: ArrayLike, mcc: MccInstance) -> "Circulation":
        return cls(flow=flow, cost=mcc.cost(flow))

    def is_feasible(self, mcc: MccInstance, tol: float = CONSERVATION_TOL) -> bool:
        within = np.all(self.flow >= -tol) and np.all(self.flow <= mcc.capacities + tol)
        return bool(within and np.all(np.abs(mcc.net_flow(self.flow)) <= tol))


# ---------------------------------------------------------------------------
# OT -> MCC
# ---------------------------------------------------------------------------


def northwest_initial(r: ArrayLike, c: ArrayLike) -> np.ndarray:
    """Integral starting plan for the OT -> MCC reduction (northwest-corner fill)."""
    return np.rint(northwest_corner(r, c)).astype(np.int64)


@dataclass(frozen=True)
class PlanRecovery:
    """
    Maps a circulation of ot_to_mcc's graph back to a transport plan.

    Attributes:
        X0: Integral starting plan
        rows: OT row touched by each edge
        cols: OT column touched by each edge
        signs: +1 for forward arcs (increase X), -1 for reverse arcs
    """

    X0: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    signs: np.ndarray

    def plan(self, flow: ArrayLike) -> np.ndarray:
        X = self.X0.astype(np.float64)
        np.add.at(X, (self.rows, self.cols), self.signs * np.asarray(flow, dtype=np.float64))
        return X


def ot_to_mcc(inst: TransportInstance) -> tuple[MccInstance, np.ndarray, PlanRecovery]:
    """
    Reduce an integral OT instance to MCC on the complete bipartite graph.

    Vertices 0..n-1 are the rows and n..n+m-1 the columns. Arcs with zero
    capacity are left out.

    Raises:
        NonIntegralCost: if Q has non-integral entries
    """
    if np.any(inst.Q != np.round(inst.Q)):
        raise NonIntegralCost("The OT -> MCC reduction needs an integral cost matrix")

    n, m = inst.n, inst.m
    X0 = northwest_initial(inst.r, inst.c)
    room = np.minimum.outer(inst.r, inst.c) - X0
    Q = inst.Q.astype(np.int64)

    fwd_i, fwd_j = np.nonzero(room > 0)
    rev_i, rev_j = np.nonzero(X0 > 0)

    tails = np.concatenate([fwd_i, n + rev_j])
    heads = np.concatenate([n + fwd_j, rev_i])
    capacities = np.concatenate([room[fwd_i, fwd_j], X0[rev_i, rev_j]])
    costs = np.concatenate([Q[fwd_i, fwd_j], -Q[rev_i, rev_j]])

    mcc = MccInstance(
        vertex_count=n + m, tails=tails, heads=heads, capacities=capacities, costs=costs
    )
    recovery = PlanRecovery(
        X0=X0,
        rows=np.concatenate([fwd_i, rev_i]),
        cols=np.concatenate([fwd_j, rev_j]),
        signs=np.concatenate([np.ones(fwd_i.size), -np.ones(rev_i.size)]),
    )
    return mcc, X0, recovery


# ---------------------------------------------------------------------------
# MCC -> OT
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CirculationRecovery:
    """Maps a feasible plan of mcc_to_ot's instance back to a circulation."""

    mcc: MccInstance

    def circulation(self, X: np.ndarray) -> Circulation:
        return circulation_from_plan(X, self.mcc)


def mcc_cost_matrix(mcc: MccInstance) -> np.ndarray:
    """Q[u, e] = c_e at the tail, 0 at the head, |E| U C everywhere else."""
    edges = np.arange(mcc.edge_count)
    Q = np.full((mcc.vertex_count, mcc.edge_count), mcc.big_m, dtype=np.int64)
    Q[mcc.tails, edges] = mcc.costs
    Q[mcc.heads, edges] = 0
    return Q


def mcc_to_ot(mcc: MccInstance) -> tuple[TransportInstance, CirculationRecovery]:
    """
    Reduce MCC to an integral OT instance with |V| rows and |E| columns.

    Raises:
        IsolatedVertex: if a vertex has no incoming capacity; remove such
            vertices first with prune_uncirculating
    """
    r = mcc.in_capacity()
    isolated = np.flatnonzero(r == 0)
    if isolated.size:
        raise IsolatedVertex(
            f"Vertices {(isolated + 1).tolist()} have no incoming edges; "
            "prune them before reducing"
        )
    inst = validate_instance(mcc_cost_matrix(mcc), r, mcc.capacities)
    return inst, CirculationRecovery(mcc=mcc)


def circulation_from_plan(X: np.ndarray, mcc: MccInstance) -> Circulation:
    """
    Read f_e = X[tail(e), e] from a feasible plan of the reduced instance.

    Raises:
        ConservationViolation: if the flow is not conserved at some vertex
    """
    X = np.asarray(X, dtype=np.float64)
    flow = X[mcc.tails, np.arange(mcc.edge_count)]
    imbalance = np.abs(mcc.net_flow(flow))
    if np.any(imbalance > CONSERVATION_TOL):
        worst = int(np.argmax(imbalance))
        raise ConservationViolation(
            f"Net flow {float(imbalance[worst]):.3g} at vertex {worst + 1}; "
            "the plan is not feasible for the reduced instance"
        )
    return Circulation.from_flow(flow, mcc)


def plan_from_circulation(flow: ArrayLike, mcc: MccInstance) -> np.ndarray:
    """X[tail(e), e] = f_e, X[head(e), e] = u_e - f_e, zero elsewhere."""
    flow = np.asarray(flow, dtype=np.float64)
    edges = np.arange(mcc.edge_count)
    X = np.zeros((mcc.vertex_count, mcc.edge_count))
    X[mcc.tails, edges] = flow
    X[mcc.heads, edges] = mcc.capacities - flow
    return X


# ---------------------------------------------------------------------------
# Integral rounding
# ---------------------------------------------------------------------------


def _support_cycle(support: np.ndarray) -> list[tuple[int, int]] | None:
    """
    Find a cycle in the bipartite graph whose edges are the True cells.

    Returns the cycle as a list of (row, col) cells in walking order, so
    consecutive cells share a row or a column, or None for a forest.
    """
    n, m = support.shape
    rows_of = [np.flatnonzero(support[:, j]) for j in range(m)]
    cols_of = [np.flatnonzero(support[i, :]) for i in range(n)]

    def neighbours(v: int) -> np.ndarray:
        return n + cols_of[v] if v < n else rows_of[v - n]

    parent = [-1] * (n + m)
    visited = [False] * (n + m)
    for root in range(n):
        if visited[root] or not cols_of[root].size:
            continue
        visited[root] = True
        stack = [(root, iter(neighbours(root)))]
        while stack:
            u, pending = stack[-1]
            v = next(pending, None)
            if v is None:
                stack.pop()
                continue
            v = int(v)
            if v == parent[u]:
                continue
            if visited[v]:
                path = [u]
                while path[-1] != v:
                    path.append(parent[path[-1]])
                cells = []
                for a, b in zip(path, path[1:] + [u]):
                    cells.append((a, b - n) if a < n else (b, a - n))
                return cells
            visited[v] = True
            parent[v] = u
            stack.append((v, iter(neighbours(v))))
    return None


def fractional_entries(X: np.ndarray) -> np.ndarray:
    """Mask of entries farther than INTEGRAL_TOL from the nearest integer."""
    return np.abs(X - np.rint(X)) > INTEGRAL_TOL


def cancel_step(X: ArrayLike, Q: np.ndarray) -> np.ndarray | None:
    """
    One rounding step on a feasible plan, or None once X is integral.

    Near-integral entries are snapped. Then mass is pushed around a cycle
    among the fractional entries, alternately adding and removing, in
    whichever direction does not increase the cost, until one entry reaches
    an integer. The marginals are integral, so a row or column never holds
    exactly one fractional entry except through floating residue; such a
    stray entry is snapped instead. Either way the number of fractional
    entries strictly drops.
    """
    X = np.array(X, dtype=np.float64)
    fractional = fractional_entries(X)
    X[~fractional] = np.rint(X[~fractional])
    if not fractional.any():
        return None

    cells = _support_cycle(fractional)
    if cells is None:
        i, j = np.argwhere(fractional)[0]
        X[i, j] = np.rint(X[i, j])
        return X

    rows, cols = np.array(cells).T
    signs = np.where(np.arange(len(cells)) % 2 == 0, 1.0, -1.0)
    if float(signs @ Q[rows, cols]) > 0.0:
        signs = -signs

    values = X[rows, cols]
    room = np.where(signs > 0, np.ceil(values) - values, values - np.floor(values))
    X[rows, cols] += signs * float(room.min())
    return X


def cycle_cancel_round(X: ArrayLike, inst: TransportInstance) -> TransportPlan:
    """Round a feasible fractional plan to an integral one without raising its cost."""
    X = np.array(X, dtype=np.float64)
    rounds = 0
    while (step := cancel_step(X, inst.Q)) is not None:
        X = step
        rounds += 1

    X = np.rint(X)
    logger.debug("Plan rounded", extra={"solver_data": {"rounds": rounds}})
    return TransportPlan.from_matrix(X, inst)


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PrunedMcc:
    """
    An MCC instance restricted to vertices that can carry circulation.

    Attributes:
        instance: The restricted instance, vertices renumbered
        vertices: Original index of each kept vertex
        edges: Original index of each kept edge
    """

    instance: MccInstance
    vertices: np.ndarray
    edges: np.ndarray

    def expand(self, flow: ArrayLike, original: MccInstance) -> np.ndarray:
        full = np.zeros(original.edge_count)
        full[self.edges] = flow
        return full


def prune_uncirculating(mcc: MccInstance) -> PrunedMcc:
    """Repeatedly drop vertices without incoming edges, with all their edges."""
    alive = np.ones(mcc.vertex_count, dtype=bool)
    while True:
        edges = alive[mcc.tails] & alive[mcc.heads]
        fed = np.zeros(mcc.vertex_count, dtype=bool)
        fed[mcc.heads[edges]] = True
        starved = alive & ~fed
        if not starved.any():
            break
        alive &= ~starved

    vertices = np.flatnonzero(alive)
    kept = np.flatnonzero(alive[mcc.tails] & alive[mcc.heads])
    renumber = np.cumsum(alive) - 1
    instance = MccInstance(
        vertex_count=int(vertices.size),
        tails=renumber[mcc.tails[kept]],
        heads=renumber[mcc.heads[kept]],
        capacities=mcc.capacities[kept],
        costs=mcc.costs[kept],
    )
    return PrunedMcc(instance=instance, vertices=vertices, edges=kept)


def mcc_epsilon(mcc: MccInstance) -> float:
    """Accuracy below the integrality gap of the reduced instance, 1 / (4 |E| U C)."""
    return 1.0 / (4.0 * max(1, mcc.edge_count) * mcc.max_capacity * mcc.max_cost)


def solve_mcc(mcc: MccInstance, epsilon: float | None = None) -> Circulation:
    """
    Exact minimum-cost circulation through the OT reduction.

    Args:
        mcc: Validated instance
        epsilon: OT accuracy; defaults to mcc_epsilon() of the pruned instance.
            Anything at or above 1/2 may lose exactness.
    """
    pruned = prune_uncirculating(mcc)
    core_mcc = pruned.instance
    if core_mcc.edge_count == 0:
        logger.info("No edge can carry circulation, returning zero flow")
        return Circulation.from_flow(np.zeros(mcc.edge_count), mcc)

    eps = mcc_epsilon(core_mcc) if epsilon is None else epsilon
    inst, recovery = mcc_to_ot(core_mcc)
    run = run_expsinkhorn(inst, eps)
    plan = cycle_cancel_round(repair_plan(run.x, inst).X, inst)
    circulation = recovery.circulation(plan.X)

    flow = np.rint(pruned.expand(circulation.flow, mcc))
    result = Circulation.from_flow(flow, mcc)
    logger.info(
        "Circulation solved",
        extra={
            "solver_data": {
                "vertices": mcc.vertex_count,
                "edges": mcc.edge_count,
                "epsilon": eps,
                "steps": run.steps,
                "cost": result.cost,
            }
        },
    )
    return result
