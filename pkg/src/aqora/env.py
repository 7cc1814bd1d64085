"""One query bound to data, estimator and simulator settings."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

from aqora.cbo import CboConfig, NoisyEstimator, assign_operators, dp_join_order, syntactic_plan
from aqora.errors import PlanningError
from aqora.planir import PlanNode
from aqora.relstore import CardinalityOracle, JoinGraph, Relation
from aqora.stagesim import ExecOutcome, ReplanHook, SimConfig, StepRecord, execute_adaptive


class SimulatedQuery:
    """Starting plans, re-planning and execution for a single query."""

    def __init__(self, query_id: str, graph: JoinGraph, relations: Mapping[str, Relation],
                 sim: SimConfig = SimConfig(), cbo: CboConfig = CboConfig(), seed: int = 0):
        self.query_id = query_id
        self.graph = graph
        self.sim = sim
        self.cbo = cbo
        self.oracle = CardinalityOracle(relations, graph)
        self.estimator = NoisyEstimator(relations, graph, cbo.sigma, seed, query_id, cbo.row_width, self.oracle)
        self._plans: dict[bool, tuple[PlanNode, float]] = {}

    @property
    def tables(self):
        return self.graph.tables

    def plan(self, use_cbo: bool) -> tuple[PlanNode, float]:
        """Starting plan with CBO on or off and its planning charge in simulated seconds."""
        hit = self._plans.get(use_cbo)
        if hit is None:
            charge = 0.0
            plan = None
            if use_cbo:
                try:
                    costed = dp_join_order(self.graph, self.estimator, self.cbo.shape, self.cbo.dp_cap)
                    plan = costed.plan
                    charge = costed.planning_steps * self.cbo.step_cost
                except PlanningError:
                    plan = None
            if plan is None:
                plan = syntactic_plan(self.graph)
            hit = (assign_operators(plan, self.estimator, self.cbo.bjt_bytes), charge)
            self._plans[use_cbo] = hit
        return hit

    def initial_plan(self) -> PlanNode:
        return self.plan(False)[0]

    def execute(self, plan: PlanNode, hook: ReplanHook | None = None,
                sim: SimConfig | None = None) -> tuple[ExecOutcome, list[StepRecord]]:
        return execute_adaptive(plan, self.oracle, hook, sim or self.sim, self.plan)


def bind_queries(specs, relations: Mapping[str, Relation], sim: SimConfig = SimConfig(),
                 cbo: CboConfig = CboConfig(), seed: int = 0) -> list[SimulatedQuery]:
    """Simulated queries for workload query specs over one dataset."""
    return [SimulatedQuery(q.query_id, q.graph(), relations, sim, cbo, seed) for q in specs]
