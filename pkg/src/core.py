"""
Transport instances, scaled dual state and plans shared by every solver.

An optimal transport instance asks for a nonnegative n x m matrix X with
row sums r and column sums c that minimizes <X, Q>. The solvers in this
package only handle integral marginals: the scale factor

    mu = max(max_i r_i, max_j c_j)

maps them into r_s = r / mu and c_s = c / mu with entries in (0, 1] while
keeping mu * r_s integral, which is what the repair step relies on.

The Sinkhorn state is the triple (eta, alpha, beta). The matrix being scaled
is implied by the duals,

    X_ij = exp(eta * (alpha_i + beta_j - Q_ij)),

and is never stored. All types here are frozen dataclasses over read-only
numpy arrays, so they can be shared between threads freely.
"""

import math
from dataclasses import dataclass, replace
from enum import StrEnum

import numpy as np
from numpy.typing import ArrayLike

from src.errors import (
    DegenerateCost,
    DimensionMismatch,
    NonFiniteCost,
    NonIntegralMarginal,
    NonPositiveMarginal,
    UnbalancedMarginals,
)

# Marginal equality tolerance for plans (absolute, per entry).
FEAS_TOL = 1e-9

# Allowed positive slack in alpha_i + beta_j <= Q_ij.
DUAL_TOL = 1e-12

# An implied entry above this counts as support for the repair network.
SUPPORT_EPS = 1e-300

# Residual capacity below this is treated as saturated by max flow.
FLOW_EPS = 1e-12


def _frozen(values: ArrayLike, dtype: type) -> np.ndarray:
    array = np.array(values, dtype=dtype)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class TransportInstance:
    """
    A validated optimal transport instance.

    Build it with validate_instance(); direct construction skips validation.

    Attributes:
        Q: n x m cost matrix (float)
        r: length-n positive integer demands
        c: length-m positive integer supplies, with sum(c) == sum(r)
    """

    Q: np.ndarray
    r: np.ndarray
    c: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "Q", _frozen(self.Q, np.float64))
        object.__setattr__(self, "r", _frozen(self.r, np.int64))
        object.__setattr__(self, "c", _frozen(self.c, np.int64))

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    @property
    def m(self) -> int:
        return self.Q.shape[1]

    @property
    def q_max(self) -> float:
        """Infinity norm of the cost matrix, max |Q_ij|."""
        return float(np.max(np.abs(self.Q)))

    @property
    def mu(self) -> int:
        return int(max(self.r.max(), self.c.max()))

    @property
    def total(self) -> int:
        return int(self.r.sum())

    def cost(self, X: np.ndarray) -> float:
        return float(np.sum(X * self.Q))


def validate_instance(Q: ArrayLike, r: ArrayLike, c: ArrayLike) -> TransportInstance:
    """
    Validate raw arrays and build a TransportInstance.

    Checks, in order: shapes, finiteness of Q, integrality of the marginals,
    strict positivity, and flow balance sum(r) == sum(c).

    Raises:
        DimensionMismatch, NonFiniteCost, NonIntegralMarginal,
        NonPositiveMarginal, UnbalancedMarginals
    """
    Q = np.asarray(Q, dtype=np.float64)
    r_raw = np.asarray(r, dtype=np.float64)
    c_raw = np.asarray(c, dtype=np.float64)

    if Q.ndim != 2 or Q.shape[0] == 0 or Q.shape[1] == 0:
        raise DimensionMismatch(f"Cost matrix must be a non-empty 2-D array, got shape {Q.shape}")
    if r_raw.ndim != 1 or r_raw.shape[0] != Q.shape[0]:
        raise DimensionMismatch(
            f"Demand vector shape {r_raw.shape} does not match {Q.shape[0]} rows"
        )
    if c_raw.ndim != 1 or c_raw.shape[0] != Q.shape[1]:
        raise DimensionMismatch(
            f"Supply vector shape {c_raw.shape} does not match {Q.shape[1]} columns"
        )

    if not np.all(np.isfinite(Q)):
        raise NonFiniteCost("Cost matrix contains NaN or infinite entries")

    for name, vec in (("r", r_raw), ("c", c_raw)):
        if not np.all(np.isfinite(vec)) or np.any(vec != np.round(vec)):
            raise NonIntegralMarginal(f"Marginal {name} must be integral, got {vec.tolist()}")
        if np.any(vec < 1):
            raise NonPositiveMarginal(
                f"Marginal {name} must be >= 1 everywhere, got {vec.tolist()}"
            )

    r_int = r_raw.astype(np.int64)
    c_int = c_raw.astype(np.int64)
    if r_int.sum() != c_int.sum():
        raise UnbalancedMarginals(
            f"Total demand {int(r_int.sum())} differs from total supply {int(c_int.sum())}"
        )

    return TransportInstance(Q=Q, r=r_int, c=c_int)


def scale_instance(inst: TransportInstance) -> tuple[np.ndarray, np.ndarray, int]:
    """Return (r / mu, c / mu, mu) with mu = max(max r, max c)."""
    mu = inst.mu
    return inst.r / mu, inst.c / mu, mu


def log_n_mu(n: int, mu: int) -> float:
    """log(n * mu), floored at log 2 so a 1 x m instance with mu = 1 keeps eta > 0."""
    return max(math.log(n * mu), math.log(2.0))


@dataclass(frozen=True)
class ScalingState:
    """
    Dual state of the scaling iteration (all quantities in scaled units).

    Attributes:
        eta: Regularization (inverse temperature), > 0
        alpha: Row potentials, length n
        beta: Column potentials, length m
        mu: Integer scale factor of the marginals
        r_s: Scaled demands r / mu
        c_s: Scaled supplies c / mu
    """

    eta: float
    alpha: np.ndarray
    beta: np.ndarray
    mu: int
    r_s: np.ndarray
    c_s: np.ndarray

    def __post_init__(self) -> None:
        for name in ("alpha", "beta", "r_s", "c_s"):
            object.__setattr__(self, name, _frozen(getattr(self, name), np.float64))

    @property
    def n(self) -> int:
        return self.alpha.shape[0]

    @property
    def m(self) -> int:
        return self.beta.shape[0]

    @property
    def mass(self) -> float:
        """||r_s||_1, equal to ||c_s||_1."""
        return float(self.r_s.sum())

    @property
    def log_n_mu(self) -> float:
        return log_n_mu(self.n, self.mu)

    @property
    def threshold(self) -> float:
        """The l1 marginal error above which a rescale is triggered, 1 / (2 mu)."""
        return 1.0 / (2.0 * self.mu)

    def exponents(self, Q: np.ndarray) -> np.ndarray:
        """Dense eta * (alpha_i + beta_j - Q_ij); used by checks and repair only."""
        return self.eta * (self.alpha[:, None] + self.beta[None, :] - Q)

    def implied_matrix(self, Q: np.ndarray) -> np.ndarray:
        return np.exp(self.exponents(Q))

    def evolve(self, **changes) -> "ScalingState":
        return replace(self, **changes)


def initial_state(inst: TransportInstance, eta: float | None = None) -> ScalingState:
    """
    Starting state: eta = 10 ||Q||_inf^-1 log(n mu), alpha = beta = -||Q||_inf.

    With these duals every implied entry is at most (n mu)^-10, so the
    scaling invariants hold before the first step. `eta` overrides the
    starting regularization (the fixed-eta baseline passes its own).

    Raises:
        DegenerateCost: if Q is identically zero
    """
    q_max = inst.q_max
    if q_max == 0.0:
        raise DegenerateCost("Cost matrix is identically zero; every feasible plan is optimal")

    r_s, c_s, mu = scale_instance(inst)
    if eta is None:
        eta = 10.0 / q_max * log_n_mu(inst.n, mu)

    return ScalingState(
        eta=float(eta),
        alpha=np.full(inst.n, -q_max),
        beta=np.full(inst.m, -q_max),
        mu=mu,
        r_s=r_s,
        c_s=c_s,
    )


def northwest_corner(r: ArrayLike, c: ArrayLike) -> np.ndarray:
    """Greedy northwest-corner fill of a plan with marginals r, c (balanced)."""
    rows = np.array(r, dtype=np.float64)
    cols = np.array(c, dtype=np.float64)
    X = np.zeros((rows.shape[0], cols.shape[0]))

    i = j = 0
    while i < rows.shape[0] and j < cols.shape[0]:
        amount = min(rows[i], cols[j])
        X[i, j] = amount
        rows[i] -= amount
        cols[j] -= amount
        if rows[i] <= 0:
            i += 1
        else:
            j += 1
    return X


def marginal_residual(X: np.ndarray, r: ArrayLike, c: ArrayLike) -> float:
    """||X 1 - r||_1 + ||X^T 1 - c||_1."""
    return float(np.abs(X.sum(axis=1) - r).sum() + np.abs(X.sum(axis=0) - c).sum())


@dataclass(frozen=True)
class TransportPlan:
    """
    A feasible transport plan in original units.

    Attributes:
        X: n x m nonnegative matrix with X 1 = r and X^T 1 = c (within FEAS_TOL)
        cost: <X, Q>
    """

    X: np.ndarray
    cost: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "X", _frozen(self.X, np.float64))

    @classmethod
    def from_matrix(cls, X: np.ndarray, inst: TransportInstance) -> "TransportPlan":
        return cls(X=X, cost=inst.cost(X))

    def is_feasible(self, r: ArrayLike, c: ArrayLike, tol: float = FEAS_TOL) -> bool:
        if np.any(self.X < 0):
            return False
        rows_ok = np.all(np.abs(self.X.sum(axis=1) - r) <= tol)
        cols_ok = np.all(np.abs(self.X.sum(axis=0) - c) <= tol)
        return bool(rows_ok and cols_ok)


class StepKind(StrEnum):
    ROW = "row"
    COL = "col"
    DOUBLE = "double"
    STOP = "stop"


@dataclass(frozen=True)
class TraceRecord:
    """
    One step of a scaling run.

    `eta`, `l1_row` and `l1_col` are the values in force when the branch was
    decided; `dual` is the dual value after the step; `gap_bound` is
    2 eta^-1 ||r_s||_1 log(n mu) at `eta`.
    """

    step: int
    eta: float
    op: StepKind
    l1_row: float
    l1_col: float
    dual: float
    gap_bound: float


@dataclass(frozen=True)
class IterationTrace:
    records: tuple[TraceRecord, ...] = ()

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def steps(self) -> int:
        """Row/column rescales plus doublings (stop markers excluded)."""
        return sum(1 for rec in self.records if rec.op != StepKind.STOP)

    def of_kind(self, *kinds: StepKind) -> list[TraceRecord]:
        return [rec for rec in self.records if rec.op in kinds]

    def duals(self) -> np.ndarray:
        return np.array([rec.dual for rec in self.records])
