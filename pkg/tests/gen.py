"""Random instances shared by the tests: tiny schemas, connected join graphs, valid plans."""
from __future__ import annotations

import itertools

import numpy as np

from aqora.cbo import join_plan, scan
from aqora.planir import CompletedStage, Join, Scan
from aqora.relstore import (ColumnRef, ColumnSpec, JoinCondition, JoinGraph, Predicate, Relation,
                            SchemaSpec, TableSpec, generate_dataset, as_mapping)


def random_instance(rng: np.random.Generator, n_tables: int, max_rows: int = 30, domain: int = 6,
                    extra_edges: int = 0, n_predicates: int = 0):
    """Small relations over a shared value domain plus a connected join graph on their columns.

    Every table has columns c0..c2 with values in [0, domain) so any pair of
    columns can be equijoined; a random spanning tree (plus ``extra_edges``)
    makes the graph connected, possibly cyclic.
    """
    names = [f"t{i}" for i in range(n_tables)]
    rels = {}
    for t in names:
        rows = int(rng.integers(1, max_rows + 1))
        cols = [ColumnSpec(f"c{k}", "attr", domain=domain) for k in range(3)]
        data = {c.name: rng.integers(0, domain, size=rows).astype(np.int64) for c in cols}
        rels[t] = Relation(t, cols, data, rows)
    edges = []
    for i in range(1, n_tables):
        j = int(rng.integers(0, i))
        edges.append(_edge(rng, names[i], names[j]))
    for _ in range(extra_edges):
        a, b = rng.choice(n_tables, size=2, replace=False)
        edges.append(_edge(rng, names[a], names[b]))
    edges = tuple(dict.fromkeys(edges))
    preds = []
    for _ in range(n_predicates):
        t = names[int(rng.integers(n_tables))]
        lo = int(rng.integers(0, domain))
        hi = int(rng.integers(lo, domain))
        preds.append(Predicate(t, f"c{int(rng.integers(3))}", lo, hi))
    graph = JoinGraph(tuple(names), edges, tuple(preds))
    return rels, graph


def _edge(rng, a, b):
    return JoinCondition(ColumnRef(a, f"c{int(rng.integers(3))}"), ColumnRef(b, f"c{int(rng.integers(3))}"))


def nested_loop_count(rels, graph: JoinGraph, subset) -> int:
    """Enumerate every row combination of ``subset`` and count those passing all predicates and edges."""
    tables = sorted(subset)
    ok_rows = {}
    for t in tables:
        rel = rels[t]
        keep = []
        for r in range(rel.row_count):
            if all(p.lo <= rel.data[p.column][r] <= p.hi for p in graph.predicates_for(t)):
                keep.append(r)
        ok_rows[t] = keep
    edges = graph.edges_within(tables)
    count = 0
    for combo in itertools.product(*(ok_rows[t] for t in tables)):
        row = dict(zip(tables, combo))
        if all(rels[e.left.table].data[e.left.column][row[e.left.table]]
               == rels[e.right.table].data[e.right.column][row[e.right.table]] for e in edges):
            count += 1
    return count


def random_plan(rng, graph: JoinGraph, tables=None):
    """A random bushy plan over a connected table set with no Cartesian joins."""
    tables = list(graph.tables if tables is None else tables)
    if len(tables) == 1:
        return scan(graph, tables[0])
    for _ in range(200):
        k = int(rng.integers(1, len(tables)))
        perm = [tables[i] for i in rng.permutation(len(tables))]
        left, right = perm[:k], perm[k:]
        if graph.is_connected(left) and graph.is_connected(right):
            try:
                return join_plan(graph, random_plan(rng, graph, left), random_plan(rng, graph, right))
            except Exception:
                continue
    # a connected graph always admits the split that peels one leaf of a spanning tree
    return left_deep(graph, _connected_order(graph, tables))


def _connected_order(graph, tables):
    order = [tables[0]]
    rest = list(tables[1:])
    while rest:
        for t in rest:
            if graph.is_connected(order + [t]):
                order.append(t)
                rest.remove(t)
                break
    return order


def left_deep(graph: JoinGraph, order):
    plan = scan(graph, order[0])
    for t in order[1:]:
        plan = join_plan(graph, plan, scan(graph, t))
    return plan


def complete_random_subtrees(rng, plan, p: float = 0.3, counter=None):
    """Fold random join subtrees into completed stages (keeping their source for evaluation)."""
    counter = counter if counter is not None else [0]
    if isinstance(plan, Join):
        if rng.random() < p:
            counter[0] += 1
            return CompletedStage(counter[0], plan.tables, plan)
        return Join(complete_random_subtrees(rng, plan.left, p, counter),
                    complete_random_subtrees(rng, plan.right, p, counter),
                    plan.conditions, plan.operator, plan.build, plan.hint)
    return plan


def star_schema(fact_rows: int = 100_000, zipf: float = 1.2, correlated: bool = True) -> SchemaSpec:
    return SchemaSpec.from_dict({"tables": [
        {"name": "fact", "rows": fact_rows, "columns": [
            {"name": "d1", "kind": "fk", "ref": "dim1.id", "zipf": zipf, "correlated": correlated},
            {"name": "d2", "kind": "fk", "ref": "dim2.id", "zipf": zipf},
            {"name": "d3", "kind": "fk", "ref": "dim3.id", "zipf": 0.0},
        ]},
        {"name": "dim1", "rows": 50, "columns": [{"name": "id", "kind": "key"},
                                                 {"name": "a", "kind": "attr", "domain": 10}]},
        {"name": "dim2", "rows": 40, "columns": [{"name": "id", "kind": "key"}]},
        {"name": "dim3", "rows": 30, "columns": [{"name": "id", "kind": "key"}]},
    ]})


def switching_instance():
    """Four tables where the first join yields 5 rows and the second 100,000 rows.

    Plan ((t1 ⋈ t2) ⋈ t3) ⋈ t4 with the second join pre-assigned SMJ and the
    third pre-assigned BHJ on its left (intermediate) side.
    """
    def rel(name, **cols):
        n = len(next(iter(cols.values())))
        specs = [ColumnSpec(c, "attr", domain=1) for c in cols]
        return Relation(name, specs, {c: np.asarray(v, dtype=np.int64) for c, v in cols.items()}, n)

    rels = {
        "t1": rel("t1", a=np.arange(5)),
        "t2": rel("t2", a=np.arange(200_000), b=np.zeros(200_000)),
        "t3": rel("t3", b=np.zeros(20_000), c=np.arange(20_000)),
        "t4": rel("t4", c=np.arange(200_000) % 20_000),
    }
    cond = lambda l, r: JoinCondition(ColumnRef.parse(l), ColumnRef.parse(r))
    e12, e23, e34 = cond("t1.a", "t2.a"), cond("t2.b", "t3.b"), cond("t3.c", "t4.c")
    graph = JoinGraph(("t1", "t2", "t3", "t4"), (e12, e23, e34))
    j1 = Join(Scan("t1"), Scan("t2"), (e12,), "BHJ", "left")
    j2 = Join(j1, Scan("t3"), (e23,), "SMJ")
    j3 = Join(j2, Scan("t4"), (e34,), "BHJ", "left")
    return rels, graph, j3
