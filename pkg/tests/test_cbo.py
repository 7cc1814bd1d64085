import itertools

import numpy as np
import pytest

from aqora.cbo import (BHJ, SMJ, CboConfig, ExactEstimator, NoisyEstimator, assign_operators, dp_join_order,
                       noise_z, syntactic_plan)
from aqora.errors import CartesianProductError, ConfigError, PlanningError
from aqora.planir import joins, leaves
from aqora.relstore import CardinalityOracle, ColumnRef, JoinCondition, JoinGraph

from gen import random_instance


def all_plans(graph, tables, shape):
    """Every Cartesian-free join tree over ``tables`` as (C_out, frozenset-of-join-sets)."""
    tables = frozenset(tables)
    if len(tables) == 1:
        yield ()
        return
    items = sorted(tables)
    for k in range(1, len(items)):
        for left in itertools.combinations(items, k):
            left = frozenset(left)
            right = tables - left
            if shape == "left-deep" and len(right) != 1:
                continue
            if not (graph.is_connected(left) and graph.is_connected(right)):
                continue
            if not any(e.tables & left and e.tables & right for e in graph.edges):
                continue
            for lp in all_plans(graph, left, shape):
                for rp in all_plans(graph, right, shape):
                    yield lp + rp + (tables,)


def brute_force_min(graph, est, shape):
    return min(sum(est.rows(s) for s in plan) for plan in all_plans(graph, graph.tables, shape))


@pytest.mark.parametrize("seed", range(12))
@pytest.mark.parametrize("shape", ["bushy", "left-deep"])
def test_dp_matches_exhaustive_enumeration(seed, shape):
    rng = np.random.default_rng(seed)
    n = 3 + seed % 3
    rels, g = random_instance(rng, n, max_rows=25, domain=5, extra_edges=seed % 2, n_predicates=1)
    for est in (ExactEstimator(CardinalityOracle(rels, g)), NoisyEstimator(rels, g, sigma=0.0)):
        got = dp_join_order(g, est, shape)
        assert got.est_cost == pytest.approx(brute_force_min(g, est, shape), rel=1e-12)
        # the returned tree really costs what it claims
        assert sum(est.rows(j.tables) for j in joins(got.plan)) == pytest.approx(got.est_cost, rel=1e-12)
        assert got.plan.tables == frozenset(g.tables)


def test_dp_cap_and_disconnected():
    rng = np.random.default_rng(1)
    rels, g = random_instance(rng, 5)
    est = NoisyEstimator(rels, g, 0.0)
    with pytest.raises(PlanningError):
        dp_join_order(g, est, dp_cap=4)
    with pytest.raises(ConfigError):
        dp_join_order(g, est, shape="zigzag")
    cut = JoinGraph(g.tables, g.edges[:1])
    with pytest.raises(CartesianProductError):
        dp_join_order(cut, NoisyEstimator(rels, cut, 0.0))


def test_independence_estimate_without_noise():
    rng = np.random.default_rng(4)
    rels, g = random_instance(rng, 2, max_rows=40, domain=7)
    est = NoisyEstimator(rels, g, 0.0)
    e = g.edges[0]
    ndv = max(len(np.unique(rels[e.left.table].data[e.left.column])),
              len(np.unique(rels[e.right.table].data[e.right.column])))
    expected = rels["t0"].row_count * rels["t1"].row_count / ndv
    assert est.rows(g.tables) == pytest.approx(expected)


def test_noise_is_deterministic_lognormal():
    z = np.array([noise_z(5, f"q{i}", ["a", "b"]) for i in range(4000)])
    assert abs(z.mean()) < 0.06 and abs(z.std() - 1) < 0.05
    assert noise_z(5, "q1", ["b", "a"]) == noise_z(5, "q1", ["a", "b"])
    with pytest.raises(ConfigError):
        NoisyEstimator({}, JoinGraph(("a",), ()), sigma=-1)


def test_syntactic_plan_skips_ahead():
    names = ("a", "b", "c")
    g = JoinGraph(names, (JoinCondition(ColumnRef("a", "x"), ColumnRef("c", "x")),
                          JoinCondition(ColumnRef("b", "x"), ColumnRef("c", "y"))))
    p = syntactic_plan(g)
    assert [x.table for x in leaves(p)] == ["a", "c", "b"]


def test_operator_assignment_threshold():
    class Fixed:
        def __init__(self, sizes):
            self.sizes = sizes

        def rows(self, s):
            return 1.0

        def bytes(self, s):
            return self.sizes[frozenset(s)]

    g = JoinGraph(("a", "b"), (JoinCondition(ColumnRef("a", "x"), ColumnRef("b", "x")),))
    plan = syntactic_plan(g)
    small = Fixed({frozenset("a"): 5e6, frozenset("b"): 4e6})
    out = assign_operators(plan, small, 10 * 2**20)
    assert out.operator == BHJ and out.build == "right"
    big = Fixed({frozenset("a"): 5e8, frozenset("b"): 4e8})
    assert assign_operators(plan, big, 10 * 2**20).operator == SMJ
    assert CboConfig().bjt_bytes == 10 * 2**20
