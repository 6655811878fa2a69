"""
Slow exact solvers used as ground truth.

Nothing here shares numeric code with the scaling engine: exact_ot runs
successive shortest paths with vertex potentials on the bipartite network,
exact_mcc cancels negative cycles found by Bellman-Ford starting from the
zero circulation. Both are meant for desk-sized instances only.
"""

import heapq
import math
from dataclasses import dataclass

import numpy as np

from src.core import TransportInstance
from src.mcc import MccInstance


@dataclass(slots=True)
class _Arc:
    """A capacitated arc; traversing it from its head walks the residual reverse."""

    tail: int
    head: int
    capacity: float
    cost: float
    flow: float = 0.0

    def residual_from(self, u: int) -> tuple[int, float, float]:
        if u == self.tail:
            return self.head, self.capacity - self.flow, self.cost
        return self.tail, self.flow, -self.cost

    def push(self, u: int, amount: float) -> None:
        self.flow += amount if u == self.tail else -amount


class _Network:
    def __init__(self, node_count: int):
        self.incident: list[list[_Arc]] = [[] for _ in range(node_count)]

    def add_arc(self, tail: int, head: int, capacity: float, cost: float) -> _Arc:
        arc = _Arc(tail, head, capacity, cost)
        self.incident[tail].append(arc)
        self.incident[head].append(arc)
        return arc

    def bellman_ford(self, source: int) -> list[float]:
        """Shortest residual distances from `source`; assumes no negative cycle."""
        dist = [math.inf] * len(self.incident)
        dist[source] = 0.0
        for _ in range(len(self.incident) - 1):
            changed = False
            for u, arcs in enumerate(self.incident):
                if dist[u] == math.inf:
                    continue
                for arc in arcs:
                    v, cap, cost = arc.residual_from(u)
                    if cap > 0 and dist[u] + cost < dist[v]:
                        dist[v] = dist[u] + cost
                        changed = True
            if not changed:
                break
        return dist

    def dijkstra(
        self, source: int, potential: list[float]
    ) -> tuple[list[float], list[tuple[_Arc, int] | None]]:
        """Reduced-cost shortest paths; `via[v]` is the arc and node v was reached from."""
        dist = [math.inf] * len(self.incident)
        via: list[tuple[_Arc, int] | None] = [None] * len(self.incident)
        dist[source] = 0.0
        heap = [(0.0, source)]
        while heap:
            d, u = heapq.heappop(heap)
            if d > dist[u]:
                continue
            for arc in self.incident[u]:
                v, cap, cost = arc.residual_from(u)
                if cap <= 0:
                    continue
                nd = d + cost + potential[u] - potential[v]
                if nd < dist[v]:
                    dist[v] = nd
                    via[v] = (arc, u)
                    heapq.heappush(heap, (nd, v))
        return dist, via


def exact_ot(inst: TransportInstance) -> tuple[float, np.ndarray]:
    """
    Optimal value and an integral optimal plan by successive shortest paths.

    Nodes: 0 = source, 1..n rows, n+1..n+m columns, n+m+1 = sink. Each
    augmentation saturates the bottleneck of a cheapest source-sink path, so
    with integral marginals every intermediate flow stays integral.
    """
    n, m = inst.n, inst.m
    source, sink = 0, n + m + 1
    net = _Network(n + m + 2)
    for i in range(n):
        net.add_arc(source, 1 + i, float(inst.r[i]), 0.0)
    cells = {}
    for i in range(n):
        for j in range(m):
            cap = float(min(inst.r[i], inst.c[j]))
            cells[i, j] = net.add_arc(1 + i, 1 + n + j, cap, float(inst.Q[i, j]))
    for j in range(m):
        net.add_arc(1 + n + j, sink, float(inst.c[j]), 0.0)

    potential = net.bellman_ford(source)
    shipped, total = 0.0, float(inst.total)
    while shipped < total:
        dist, via = net.dijkstra(source, potential)
        if via[sink] is None:
            break
        for v, d in enumerate(dist):
            if d < math.inf:
                potential[v] += d

        path = []
        v = sink
        while v != source:
            arc, u = via[v]
            path.append((arc, u))
            v = u
        amount = min(arc.residual_from(u)[1] for arc, u in path)
        for arc, u in path:
            arc.push(u, amount)
        shipped += amount

    X = np.zeros((n, m), dtype=np.int64)
    for (i, j), arc in cells.items():
        X[i, j] = round(arc.flow)
    return inst.cost(X), X


def find_negative_cycle(mcc: MccInstance, flow: np.ndarray) -> list[tuple[int, int]] | None:
    """
    A negative-cost cycle of the residual graph of `flow`, or None.

    The cycle is a list of (edge, direction) with direction +1 to push along
    the edge and -1 to push against it. Bellman-Ford runs from a virtual
    source joined to every vertex at cost 0.
    """
    residual = []
    for e in range(mcc.edge_count):
        tail, head, cost = int(mcc.tails[e]), int(mcc.heads[e]), int(mcc.costs[e])
        if flow[e] < mcc.capacities[e]:
            residual.append((tail, head, cost, e, 1))
        if flow[e] > 0:
            residual.append((head, tail, -cost, e, -1))

    V = mcc.vertex_count
    if not residual:
        return None
    dist = [0] * V
    parent: list[tuple[int, int, int] | None] = [None] * V
    last = -1
    for _ in range(V):
        last = -1
        for u, v, cost, e, direction in residual:
            if dist[u] + cost < dist[v]:
                dist[v] = dist[u] + cost
                parent[v] = (u, e, direction)
                last = v
        if last < 0:
            return None

    # `last` was relaxed in round V, so walking back V parents lands on the cycle.
    v = last
    for _ in range(V):
        v = parent[v][0]
    cycle = []
    u = v
    while True:
        prev, e, direction = parent[u]
        cycle.append((e, direction))
        u = prev
        if u == v:
            break
    cycle.reverse()
    return cycle


def exact_mcc(mcc: MccInstance) -> tuple[int, np.ndarray]:
    """Minimum cost and an integral optimal circulation by negative-cycle canceling."""
    flow = np.zeros(mcc.edge_count, dtype=np.int64)
    while (cycle := find_negative_cycle(mcc, flow)) is not None:
        amount = min(
            int(mcc.capacities[e] - flow[e]) if direction > 0 else int(flow[e])
            for e, direction in cycle
        )
        for e, direction in cycle:
            flow[e] += direction * amount
    return int(np.dot(mcc.costs, flow)), flow
