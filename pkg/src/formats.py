"""
File formats read and written by the command line.

Instance and plan files are JSON documents validated by pydantic models.
Keys are written in a fixed order (n, m, Q, r, c for instances; n, m, X,
cost for plans) and integral numbers are written as JSON integers, so a
file survives parse -> serialize -> parse byte for byte.

Traces and benchmark reports are CSV with fixed headers. MCC instances use
a DIMACS-like text format:

    c comment
    p mcc <vertices> <edges>
    a <tail> <head> <capacity> <cost>      (1-indexed vertices)

and a solved circulation is written as `s <cost>` followed by one
`f <tail> <head> <flow>` line per edge in input order.
"""

import csv
import math
from dataclasses import astuple, dataclass, fields
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from src.core import IterationTrace, TransportInstance, TransportPlan
from src.errors import FormatError
from src.mcc import Circulation, MccInstance, validate_mcc

Number = int | float

TRACE_HEADER = ("step", "eta", "op", "l1_row", "l1_col", "dual", "gap_bound")


def _number(value: float) -> Number:
    """Integral finite values become int so they serialize without a trailing .0."""
    value = float(value)
    if math.isfinite(value) and value.is_integer():
        return int(value)
    return value


# ---------------------------------------------------------------------------
# JSON instance and plan files
# ---------------------------------------------------------------------------


class InstanceFile(BaseModel):
    """
    On-disk OT instance.

    Shapes are checked here; the numeric checks (balance, integrality,
    positivity, finiteness) are left to validate_instance so they surface
    with their own error types.
    """

    model_config = ConfigDict(extra="forbid")

    n: int
    m: int
    Q: list[list[Number]]
    r: list[Number]
    c: list[Number]

    @model_validator(mode="after")
    def check_shapes(self) -> "InstanceFile":
        if self.n < 1 or self.m < 1:
            raise ValueError(f"n and m must be positive, got n={self.n}, m={self.m}")
        if len(self.Q) != self.n or any(len(row) != self.m for row in self.Q):
            raise ValueError(f"Q must be {self.n} rows of {self.m} entries")
        if len(self.r) != self.n or len(self.c) != self.m:
            raise ValueError(f"r must have {self.n} entries and c {self.m}")
        return self

    @classmethod
    def from_instance(cls, inst: TransportInstance) -> "InstanceFile":
        return cls(
            n=inst.n,
            m=inst.m,
            Q=[[_number(q) for q in row] for row in inst.Q],
            r=[int(v) for v in inst.r],
            c=[int(v) for v in inst.c],
        )


class PlanFile(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n: int
    m: int
    X: list[list[Number]]
    cost: Number

    @model_validator(mode="after")
    def check_shape(self) -> "PlanFile":
        if len(self.X) != self.n or any(len(row) != self.m for row in self.X):
            raise ValueError(f"X must be {self.n} rows of {self.m} entries")
        return self

    @classmethod
    def from_plan(cls, plan: TransportPlan) -> "PlanFile":
        n, m = plan.X.shape
        return cls(
            n=n,
            m=m,
            X=[[_number(x) for x in row] for row in plan.X],
            cost=_number(plan.cost),
        )

    def matrix(self) -> np.ndarray:
        return np.array(self.X, dtype=np.float64)


def _parse(model: type[BaseModel], text: str, source: str) -> BaseModel:
    try:
        return model.model_validate_json(text)
    except ValidationError as e:
        raise FormatError(f"{source}: {e.error_count()} problem(s): {e.errors()[0]['msg']}") from e


def parse_instance_file(text: str, source: str = "<instance>") -> InstanceFile:
    """
    Raises:
        FormatError: if the document is not a well-formed instance file
    """
    return _parse(InstanceFile, text, source)


def parse_plan_file(text: str, source: str = "<plan>") -> PlanFile:
    return _parse(PlanFile, text, source)


def read_text(path: Path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise FormatError(f"Cannot read {path}: {e.strerror}") from e


def read_instance_file(path: Path) -> InstanceFile:
    return parse_instance_file(read_text(path), source=str(path))


def read_plan_file(path: Path) -> PlanFile:
    return parse_plan_file(read_text(path), source=str(path))


def write_model(model: BaseModel, path: Path) -> None:
    Path(path).write_text(model.model_dump_json() + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# CSV traces and reports
# ---------------------------------------------------------------------------


def write_trace(trace: IterationTrace, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(TRACE_HEADER)
        for rec in trace:
            writer.writerow(
                [
                    rec.step,
                    repr(rec.eta),
                    rec.op.value,
                    repr(rec.l1_row),
                    repr(rec.l1_col),
                    repr(rec.dual),
                    repr(rec.gap_bound),
                ]
            )


def read_trace_rows(path: Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != TRACE_HEADER:
            raise FormatError(f"{path}: unexpected trace header {reader.fieldnames}")
        return list(reader)


@dataclass(frozen=True)
class ReportRow:
    """One (mode, epsilon) cell group of a benchmark sweep."""

    mode: str
    epsilon: float
    cells: int
    failures: int
    median_iterations: float
    median_cost_gap: float


REPORT_HEADER = tuple(f.name for f in fields(ReportRow))


def write_report(rows: list[ReportRow], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(REPORT_HEADER)
        for row in rows:
            writer.writerow(astuple(row))


def read_report(path: Path) -> list[ReportRow]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != REPORT_HEADER:
            raise FormatError(f"{path}: unexpected report header {reader.fieldnames}")
        return [
            ReportRow(
                mode=row["mode"],
                epsilon=float(row["epsilon"]),
                cells=int(row["cells"]),
                failures=int(row["failures"]),
                median_iterations=float(row["median_iterations"]),
                median_cost_gap=float(row["median_cost_gap"]),
            )
            for row in reader
        ]


# ---------------------------------------------------------------------------
# DIMACS-like MCC files
# ---------------------------------------------------------------------------


def parse_dimacs(text: str, source: str = "<mcc>") -> MccInstance:
    """
    Parse the `p mcc` / `a` line format into a validated MccInstance.

    Raises:
        FormatError: on malformed lines, a missing or repeated problem line,
            or an edge count that disagrees with it
        InvalidMccInstance: if the edges themselves are invalid
    """
    header: tuple[int, int] | None = None
    edges: list[list[int]] = []

    for lineno, line in enumerate(text.splitlines(), start=1):
        tokens = line.split()
        if not tokens or tokens[0] == "c":
            continue
        kind, values = tokens[0], tokens[1:]
        try:
            if kind == "p":
                if header is not None:
                    raise FormatError(f"{source}:{lineno}: repeated problem line")
                if len(values) != 3 or values[0] != "mcc":
                    raise FormatError(f"{source}:{lineno}: expected 'p mcc <V> <E>'")
                header = (int(values[1]), int(values[2]))
            elif kind == "a":
                if header is None:
                    raise FormatError(f"{source}:{lineno}: arc before problem line")
                if len(values) != 4:
                    raise FormatError(f"{source}:{lineno}: expected 'a <tail> <head> <cap> <cost>'")
                edges.append([int(v) for v in values])
            else:
                raise FormatError(f"{source}:{lineno}: unknown line type '{kind}'")
        except ValueError as e:
            raise FormatError(f"{source}:{lineno}: {e}") from e

    if header is None:
        raise FormatError(f"{source}: missing problem line 'p mcc <V> <E>'")
    vertex_count, edge_count = header
    if len(edges) != edge_count:
        raise FormatError(f"{source}: problem line declares {edge_count} arcs, found {len(edges)}")

    table = np.array(edges, dtype=np.int64).reshape(-1, 4)
    return validate_mcc(
        vertex_count,
        tails=table[:, 0] - 1,
        heads=table[:, 1] - 1,
        capacities=table[:, 2],
        costs=table[:, 3],
    )


def format_dimacs(mcc: MccInstance) -> str:
    lines = [f"p mcc {mcc.vertex_count} {mcc.edge_count}"]
    for tail, head, cap, cost in zip(mcc.tails, mcc.heads, mcc.capacities, mcc.costs):
        lines.append(f"a {tail + 1} {head + 1} {cap} {cost}")
    return "\n".join(lines) + "\n"


def format_circulation(circulation: Circulation, mcc: MccInstance) -> str:
    lines = [f"s {_number(circulation.cost)}"]
    for tail, head, flow in zip(mcc.tails, mcc.heads, circulation.flow):
        lines.append(f"f {tail + 1} {head + 1} {_number(flow)}")
    return "\n".join(lines) + "\n"
