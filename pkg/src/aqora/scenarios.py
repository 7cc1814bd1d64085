"""Small self-contained query environments for sanity checks."""
from __future__ import annotations

from dataclasses import replace

from aqora.cbo import CboConfig, syntactic_plan
from aqora.relstore import ColumnRef, JoinCondition, JoinGraph, SchemaSpec, as_mapping, generate_dataset
from aqora.env import SimulatedQuery
from aqora.stagesim import SimConfig

_BANDIT_SCHEMA = SchemaSpec.from_dict({"tables": [
    {"name": "a", "rows": 50, "columns": [{"name": "id", "kind": "key"}]},
    {"name": "b", "rows": 200, "columns": [{"name": "a_id", "kind": "fk", "ref": "a.id"}]},
]})


class BanditQuery(SimulatedQuery):
    """Two-table query whose simulated cost depends only on the CBO switch."""

    def __init__(self, query_id: str, cost_on: float = 2.0, cost_off: float = 20.0, seed: int = 0):
        rels = as_mapping(generate_dataset(_BANDIT_SCHEMA, seed))
        graph = JoinGraph(("a", "b"), (JoinCondition(ColumnRef("a", "id"), ColumnRef("b", "a_id")),))
        super().__init__(query_id, graph, rels, SimConfig(max_steps=1, seed=seed), CboConfig(), seed)
        self.cost_on, self.cost_off = cost_on, cost_off

    def plan(self, use_cbo: bool):
        return syntactic_plan(self.graph), 0.0

    def execute(self, plan, hook=None, sim=None):
        outcome, log = super().execute(plan, hook, sim)
        cost = self.cost_on if outcome.cbo_used else self.cost_off
        return replace(outcome, total_cost=cost), log


def bandit_workload(n: int, seed: int = 0) -> list[BanditQuery]:
    return [BanditQuery(f"bandit{i:03d}", seed=seed) for i in range(n)]
