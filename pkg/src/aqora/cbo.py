"""Cost-based join ordering over deliberately noisy cardinality estimates.

The estimator applies the independence assumption (product of filtered base
sizes times ``1/max(ndv)`` per join edge) and multiplies every estimate by a
log-normal factor fixed per (seed, query, table subset).  Join enumeration is
dynamic programming under the C_out cost: the sum of estimated rows over all
join results.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Protocol

import numpy as np

from aqora.errors import CartesianProductError, ConfigError, PlanningError
from aqora.planir import BHJ, SMJ, Join, PlanNode, Scan, Unary, joins
from aqora.relstore import CardinalityOracle, JoinGraph, Relation

MB = 1 << 20


@dataclass(frozen=True)
class CboConfig:
    sigma: float = 0.8
    dp_cap: int = 12
    bjt_bytes: float = 10 * MB
    shape: str = "bushy"
    row_width: int = 64
    # simulated seconds charged per DP state expanded
    step_cost: float = 1e-4


@dataclass(frozen=True)
class CardEstimate:
    subset: frozenset[str]
    estimated_rows: float
    estimated_bytes: float


@dataclass(frozen=True)
class CostedPlan:
    plan: PlanNode
    est_cost: float
    planning_steps: int


class Estimator(Protocol):
    def rows(self, subset: Iterable[str]) -> float: ...

    def bytes(self, subset: Iterable[str]) -> float: ...


def noise_z(seed: int, query_id: str, subset: Iterable[str]) -> float:
    key = f"{seed}|{query_id}|{','.join(sorted(subset))}".encode()
    h = int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")
    return float(np.random.default_rng(h).standard_normal())


class ExactEstimator:
    """True cardinalities; used as the noise-free reference."""

    def __init__(self, oracle: CardinalityOracle, row_width: int = 64):
        self.oracle = oracle
        self.row_width = row_width

    def rows(self, subset):
        return float(self.oracle.count(subset))

    def bytes(self, subset):
        s = frozenset(subset)
        return self.rows(s) * self.row_width * len(s)


class NoisyEstimator:
    def __init__(self, relations: Mapping[str, Relation], graph: JoinGraph, sigma: float = 0.8,
                 seed: int = 0, query_id: str = "", row_width: int = 64,
                 oracle: CardinalityOracle | None = None):
        if sigma < 0:
            raise ConfigError("estimator sigma must be >= 0")
        self.graph = graph
        self.sigma = sigma
        self.seed = seed
        self.query_id = query_id
        self.row_width = row_width
        self.oracle = oracle or CardinalityOracle(relations, graph)
        self._sel = {}
        for e in graph.edges:
            if len(e.tables) != 2:
                continue
            rl = self.oracle.relations[e.left.table]
            rr = self.oracle.relations[e.right.table]
            ndv = max(rl.ndv(e.left.column), rr.ndv(e.right.column), 1)
            self._sel[e] = 1.0 / ndv
        self._cache: dict[frozenset, float] = {}

    def _noise(self, subset) -> float:
        if self.sigma == 0:
            return 1.0
        return math.exp(self.sigma * noise_z(self.seed, self.query_id, subset))

    def rows(self, subset):
        s = frozenset(subset)
        hit = self._cache.get(s)
        if hit is not None:
            return hit
        if not s or not self.graph.is_connected(s):
            raise CartesianProductError(s)
        if len(s) == 1:
            est = float(len(self.oracle.rows(next(iter(s))))) * self._noise(s)
        else:
            est = 1.0
            for t in s:
                est *= self.rows({t})
            for e in self.graph.edges_within(s):
                est *= self._sel.get(e, 1.0)
            est *= self._noise(s)
        self._cache[s] = est
        return est

    def bytes(self, subset):
        s = frozenset(subset)
        return self.rows(s) * self.row_width * len(s)

    def estimate(self, subset) -> CardEstimate:
        s = frozenset(subset)
        return CardEstimate(s, self.rows(s), self.bytes(s))


def estimate_cardinality(graph: JoinGraph, subset: Iterable[str], estimator: NoisyEstimator) -> CardEstimate:
    if estimator.graph is not graph and estimator.graph != graph:
        raise ConfigError("estimator was built for a different join graph")
    return estimator.estimate(subset)


# ---------------------------------------------------------------------------
# plans


def _adjacency(graph: JoinGraph) -> list[int]:
    idx = {t: i for i, t in enumerate(graph.tables)}
    adj = [0] * len(graph.tables)
    for e in graph.edges:
        if len(e.tables) == 2:
            a, b = idx[e.left.table], idx[e.right.table]
            adj[a] |= 1 << b
            adj[b] |= 1 << a
    return adj


def _tables_of(mask: int, graph: JoinGraph) -> frozenset[str]:
    return frozenset(t for i, t in enumerate(graph.tables) if mask >> i & 1)


def _crossing(graph: JoinGraph, left: frozenset[str], right: frozenset[str]):
    both = left | right
    return tuple(sorted((e for e in graph.edges_within(both)
                         if not e.tables <= left and not e.tables <= right), key=str))


def join_plan(graph: JoinGraph, left: PlanNode, right: PlanNode) -> Join:
    conds = _crossing(graph, left.tables, right.tables)
    if not conds:
        raise CartesianProductError(left.tables | right.tables)
    return Join(left, right, conds)


def scan(graph: JoinGraph, table: str) -> Scan:
    return Scan(table, graph.predicates_for(table))


def dp_join_order(graph: JoinGraph, estimator: Estimator, shape: str = "bushy",
                  dp_cap: int = 12) -> CostedPlan:
    n = len(graph.tables)
    if n > dp_cap:
        raise PlanningError(f"{n} tables exceed the DP cap of {dp_cap}; fall back to the syntactic order")
    if not graph.is_connected(graph.tables):
        raise CartesianProductError(graph.tables)
    if shape not in ("left-deep", "bushy"):
        raise ConfigError(f"unknown plan shape {shape!r}")
    adj = _adjacency(graph)

    def neighbours(mask):
        out = 0
        m = mask
        while m:
            low = m & -m
            out |= adj[low.bit_length() - 1]
            m ^= low
        return out

    best: dict[int, tuple[float, int, int]] = {1 << i: (0.0, 0, 0) for i in range(n)}
    steps = 0
    full = (1 << n) - 1
    by_size = sorted(range(1, full + 1), key=lambda m: (bin(m).count("1"), m))
    for s in by_size:
        if s & (s - 1) == 0:
            continue
        choice = None
        if shape == "left-deep":
            m = s
            while m:
                low = m & -m
                rest = s ^ low
                m ^= low
                if rest in best and adj[low.bit_length() - 1] & rest:
                    steps += 1
                    c = best[rest][0]
                    if choice is None or c < choice[0]:
                        choice = (c, rest, low)
        else:
            sub = s & -s
            while sub != s:
                other = s ^ sub
                if sub in best and other in best and neighbours(sub) & other:
                    steps += 1
                    c = best[sub][0] + best[other][0]
                    if choice is None or c < choice[0]:
                        choice = (c, sub, other)
                sub = (sub - s) & s
        if choice is not None:
            est = estimator.rows(_tables_of(s, graph))
            best[s] = (choice[0] + est, choice[1], choice[2])

    def build(mask) -> PlanNode:
        if mask & (mask - 1) == 0:
            return scan(graph, graph.tables[mask.bit_length() - 1])
        _, l, r = best[mask]
        return join_plan(graph, build(l), build(r))

    return CostedPlan(build(full), best[full][0], steps)


def syntactic_plan(graph: JoinGraph) -> PlanNode:
    """Left-deep in listed order, skipping ahead past tables that would need a Cartesian product."""
    remaining = list(graph.tables)
    plan: PlanNode = scan(graph, remaining.pop(0))
    while remaining:
        for k, t in enumerate(remaining):
            if _crossing(graph, plan.tables, frozenset((t,))):
                plan = join_plan(graph, plan, scan(graph, t))
                remaining.pop(k)
                break
        else:
            raise CartesianProductError(graph.tables)
    return plan


def assign_operators(plan: PlanNode, estimator: Estimator, bjt_bytes: float) -> PlanNode:
    """Broadcast the smaller side of each join when its estimated bytes fall under the threshold."""
    if isinstance(plan, Unary):
        return Unary(plan.op, assign_operators(plan.child, estimator, bjt_bytes))
    if not isinstance(plan, Join):
        return plan
    left = assign_operators(plan.left, estimator, bjt_bytes)
    right = assign_operators(plan.right, estimator, bjt_bytes)
    node = Join(left, right, plan.conditions, plan.operator, plan.build, plan.hint)
    if node.hint:
        return node.with_operator(BHJ, node.hint)
    lb, rb = estimator.bytes(left.tables), estimator.bytes(right.tables)
    side, size = ("right", rb) if rb <= lb else ("left", lb)
    if size < bjt_bytes:
        return node.with_operator(BHJ, side)
    return node.with_operator(SMJ)
