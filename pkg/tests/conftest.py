"""
Shared test fixtures for the solver test suite.

Key fixtures:
- instance_a: the 2x2 reference instance used throughout (OPT = 4)
- make_instance: factory building a validated instance from nested lists
- random_instance: factory for seeded random integral instances
- make_mcc: factory building a validated circulation instance from edge tuples
- random_mcc: factory for seeded random small circulation instances

Testing approach:
    Exact values come from the oracles in src.oracle, which share no code
    with the scaling engine. scipy.optimize.linprog serves as a third,
    independent check where it is cheap. Property tests draw from
    numpy.random.default_rng with explicit seeds and are parametrized over
    them, so every failure names a reproducible seed.
"""

import numpy as np
import pytest

from src.cli import generate_instance
from src.core import validate_instance
from src.mcc import validate_mcc

# Instance A: Q = [[1, 2], [3, 1]], r = [2, 1], c = [1, 2].
# Feasible plans are [[t, 2 - t], [1 - t, t]] for t in [0, 1] with cost 7 - 3t,
# so OPT = 4 at [[1, 1], [0, 1]].
INSTANCE_A = {"Q": [[1, 2], [3, 1]], "r": [2, 1], "c": [1, 2]}
OPT_A = 4.0


@pytest.fixture
def instance_a():
    return validate_instance(**INSTANCE_A)


@pytest.fixture
def make_instance():
    """
    Factory fixture: make_instance(Q, r, c) -> TransportInstance.

    Usage in tests:
        def test_something(make_instance):
            inst = make_instance([[5]], [1], [1])
    """

    def _make_instance(Q, r, c):
        return validate_instance(Q, r, c)

    return _make_instance


@pytest.fixture
def random_instance():
    """
    Factory fixture for seeded random integral instances.

    Sizes are drawn in [2, max_size]; costs are in [1, cost_max] and
    marginal entries at most marg_max.
    """

    def _random_instance(seed: int, max_size: int = 8, cost_max: int = 10, marg_max: int = 10):
        rng = np.random.default_rng(10_000 + seed)
        n, m = (int(v) for v in rng.integers(2, max_size + 1, size=2))
        return generate_instance(n, m, cost_max, marg_max, seed)

    return _random_instance


@pytest.fixture
def make_mcc():
    """
    Factory fixture: make_mcc(vertex_count, edges) with 0-indexed edge
    tuples (tail, head, capacity, cost).
    """

    def _make_mcc(vertex_count: int, edges: list[tuple[int, int, int, int]]):
        table = np.array(edges, dtype=np.int64).reshape(-1, 4)
        return validate_mcc(vertex_count, table[:, 0], table[:, 1], table[:, 2], table[:, 3])

    return _make_mcc


@pytest.fixture
def random_mcc(make_mcc):
    """
    Factory fixture for seeded random circulation instances.

    Every vertex gets at least one incoming and one outgoing edge along a
    random Hamiltonian cycle, so negative-cost cycles show up often; the
    remaining edges are random non-loop pairs.
    """

    def _random_mcc(seed: int, max_vertices: int = 5, max_cap: int = 3, max_cost: int = 3):
        rng = np.random.default_rng(20_000 + seed)
        V = int(rng.integers(2, max_vertices + 1))
        order = rng.permutation(V)
        pairs = [(int(order[k]), int(order[(k + 1) % V])) for k in range(V)]
        for _ in range(int(rng.integers(0, V + 1))):
            tail, head = (int(v) for v in rng.choice(V, size=2, replace=False))
            pairs.append((tail, head))
        edges = []
        for tail, head in pairs:
            capacity = int(rng.integers(1, max_cap + 1))
            cost = int(rng.integers(-max_cost, max_cost + 1))
            edges.append((tail, head, capacity, cost))
        return make_mcc(V, edges)

    return _random_mcc
