"""Deterministic staged execution with adaptive operator switching.

A query runs as a wave of scan stages followed by one stage per join,
bottom-up.  Between stages the adaptive rule re-derives join operators from
the actual bytes of completed inputs, then the re-planning hook may fire and
restructure whatever has not run yet.  Time is simulated: each join stage is
charged by a closed-form cost model in simulated seconds.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from aqora.errors import ConfigError, InvalidActionError
from aqora.planir import (BHJ, NOOP, SMJ, Action, CompletedStage, Join, PlanNode, Scan, Unary,
                          apply_swap_or_lead, enclosing_join_side, expand, inject_broadcast_hint,
                          joins, leaves, planned_shuffles)
from aqora.relstore import CardinalityOracle

MB = 1 << 20
PRE = "pre-execution"
IN = "in-execution"

COMPLETED = "Completed"
OOM = "OOM"
TIMEOUT = "Timeout"


@dataclass(frozen=True)
class SimConfig:
    bjt_bytes: float = 10 * MB
    memory_budget: float = 256 * MB
    timeout_budget: float = 300.0
    row_width: int = 64
    c_shuffle: float = 2e-7
    c_sort: float = 5e-8
    c_merge: float = 1e-7
    c_bcast: float = 1e-6
    c_probe: float = 1e-7
    executors: int = 6
    trigger: str = "every-stage"
    trigger_q: float = 0.5
    max_steps: int = 3
    pre_steps: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.trigger not in ("every-stage", "geometric"):
            raise ConfigError(f"unknown trigger schedule {self.trigger!r}")
        if not 0 < self.trigger_q <= 1:
            raise ConfigError("trigger_q must lie in (0, 1]")
        if self.max_steps < 0 or self.pre_steps < 0:
            raise ConfigError("step budgets must be >= 0")

    def bytes_of(self, rows: float, n_tables: int) -> float:
        return float(rows) * self.row_width * n_tables


@dataclass(frozen=True)
class StageStats:
    stage_id: int
    table_set: frozenset[str]
    output_rows: int
    output_bytes: float
    shuffles_so_far: int
    cost_so_far: float
    operator: str = "Scan"

    def to_record(self) -> dict:
        return {"stage_id": self.stage_id, "tables": sorted(self.table_set), "operator": self.operator,
                "rows": self.output_rows, "bytes": self.output_bytes,
                "shuffles": self.shuffles_so_far, "cost": self.cost_so_far}


@dataclass(frozen=True)
class StepRecord:
    step: int
    phase: str
    stages_done: int
    action: str
    applied: bool
    shuffles_before: int
    shuffles_after: int
    note: str = ""

    @property
    def extra_shuffles(self) -> int:
        return self.shuffles_after - self.shuffles_before


@dataclass
class ExecOutcome:
    status: str
    total_cost: float
    total_shuffles: int
    final_plan: PlanNode
    stage_log: list[StageStats]
    planning_cost: float = 0.0
    decisions: int = 0
    cbo_used: bool = False

    @property
    def completed(self) -> bool:
        return self.status == COMPLETED

    def to_jsonl(self) -> str:
        lines = [json.dumps({"type": "stage", **s.to_record()}, sort_keys=True) for s in self.stage_log]
        lines.append(json.dumps({"type": "outcome", "status": self.status, "cost": self.total_cost,
                                 "shuffles": self.total_shuffles, "planning_cost": self.planning_cost,
                                 "decisions": self.decisions}, sort_keys=True))
        return "\n".join(lines) + "\n"


HookFn = Callable[[PlanNode, Sequence[StageStats], str], Action]


@dataclass
class ReplanHook:
    callback: HookFn
    max_steps: int = 3


def stage_cost(join: Join | None, left_rows: float, right_rows: float, operator: str,
               config: SimConfig, out_rows: float = 0.0, build: str = "right") -> tuple[float, int]:
    """Simulated seconds and shuffle count for one join stage."""
    L, R, out = float(left_rows), float(right_rows), float(out_rows)
    if operator == SMJ:
        cost = (config.c_shuffle * (L + R)
                + config.c_sort * (L * math.log2(L + 1) + R * math.log2(R + 1))
                + config.c_merge * (L + R + out))
        return cost, 2
    if operator == BHJ:
        b, p = (L, R) if build == "left" else (R, L)
        return config.c_bcast * b * config.executors + config.c_probe * (p + out), 0
    raise ConfigError(f"unknown operator {operator!r}")


def count_extra_shuffles(plan_before: PlanNode, plan_after: PlanNode) -> int:
    return planned_shuffles(plan_after) - planned_shuffles(plan_before)


def aqe_reoptimize(plan: PlanNode, stats: dict[int, StageStats], config: SimConfig) -> PlanNode:
    """Re-derive each pending join's operator from the actual bytes of its completed inputs."""

    def known(n):
        if isinstance(n, CompletedStage) and n.stage_id in stats:
            return stats[n.stage_id].output_bytes
        return None

    def fix(n):
        if isinstance(n, Unary):
            return replace(n, child=fix(n.child))
        if not isinstance(n, Join):
            return n
        left, right = fix(n.left), fix(n.right)
        if left is not n.left or right is not n.right:
            n = replace(n, left=left, right=right)
        if n.hint:
            return n if n.operator == BHJ and n.build == n.hint else n.with_operator(BHJ, n.hint)
        lb, rb = known(n.left), known(n.right)
        if lb is not None and rb is not None:
            side, size = ("right", rb) if rb <= lb else ("left", lb)
            target = (BHJ, side) if size < config.bjt_bytes else (SMJ, None)
        elif lb is not None or rb is not None:
            side, size = ("left", lb) if lb is not None else ("right", rb)
            if size < config.bjt_bytes:
                target = (BHJ, side)
            elif n.operator == BHJ and n.build == side:
                target = (SMJ, None)
            else:
                target = (n.operator, n.build)
        else:
            target = (n.operator, n.build)
        if (n.operator, n.build) == target:
            return n
        return n.with_operator(*target)

    return fix(plan)


def apply_action(plan: PlanNode, action: Action, phase: str,
                 replan: Callable[[bool], tuple[PlanNode, float]] | None = None):
    """Apply one agent action; returns (plan, applied, note, planning cost charged)."""
    if action.kind == "no-op":
        return plan, False, "", 0.0
    if action.kind == "cbo":
        if phase != PRE:
            raise InvalidActionError(f"{action} is only legal before execution")
        if action.i not in (0, 1):
            raise InvalidActionError(f"{action} invalid")
        if replan is None:
            return plan, False, "no planner attached", 0.0
        new, charge = replan(bool(action.i))
        return new, new != plan, "", charge
    if action.kind in ("swap", "lead"):
        new = apply_swap_or_lead(plan, action)
        if new is plan:
            return plan, False, "bounced: no connecting condition", 0.0
        return new, True, "", 0.0
    if action.kind == "broadcast":
        if enclosing_join_side(plan, action.i) is None:
            return plan, False, "no enclosing join", 0.0
        new = inject_broadcast_hint(plan, action.i)
        return new, new != plan, "", 0.0
    raise InvalidActionError(f"unknown action {action}")


def _ready_join_path(plan: PlanNode) -> list[str] | None:
    """Path to the first join (post-order) whose inputs are all completed."""

    def walk(n, path):
        if isinstance(n, Join):
            r = walk(n.left, path + ["left"])
            if r is not None:
                return r
            r = walk(n.right, path + ["right"])
            if r is not None:
                return r
            if isinstance(n.left, CompletedStage) and isinstance(n.right, CompletedStage):
                return path
        elif isinstance(n, Unary):
            return walk(n.child, path + ["child"])
        return None

    return walk(plan, [])


def _get(n, path):
    for step in path:
        n = getattr(n, step)
    return n


def _put(n, path, value):
    if not path:
        return value
    return replace(n, **{path[0]: _put(getattr(n, path[0]), path[1:], value)})


def _strip_unary(n: PlanNode) -> PlanNode:
    if isinstance(n, Unary):
        return _strip_unary(n.child)
    if isinstance(n, Join):
        return replace(n, left=_strip_unary(n.left), right=_strip_unary(n.right))
    return n


def complete_scans(plan: PlanNode, first_id: int = 0) -> tuple[PlanNode, list[CompletedStage]]:
    """Replace every scan leaf by a completed stage (structure only)."""
    made: list[CompletedStage] = []

    def walk(n):
        if isinstance(n, Scan):
            st = CompletedStage(first_id + len(made), n.tables, n)
            made.append(st)
            return st
        if isinstance(n, Join):
            return replace(n, left=walk(n.left), right=walk(n.right))
        if isinstance(n, Unary):
            return replace(n, child=walk(n.child))
        return n

    return walk(plan), made


def complete_next(plan: PlanNode, stage_id: int) -> tuple[PlanNode, Join | None]:
    """Fold the next ready join into a completed stage (structure only)."""
    path = _ready_join_path(plan)
    if path is None:
        return plan, None
    j = _get(plan, path)
    return _put(plan, path, CompletedStage(stage_id, j.tables, j)), j


def execute_adaptive(plan: PlanNode, oracle: CardinalityOracle, hook: ReplanHook | None = None,
                     config: SimConfig = SimConfig(),
                     replan: Callable[[bool], tuple[PlanNode, float]] | None = None,
                     ) -> tuple[ExecOutcome, list[StepRecord]]:
    """Run ``plan`` stage by stage; deterministic for fixed inputs and ``config.seed``."""
    plan = _strip_unary(plan)
    rng = np.random.default_rng(config.seed)
    budget = min(hook.max_steps, config.max_steps) if hook is not None else 0
    log: list[StepRecord] = []
    stage_log: list[StageStats] = []
    stats: dict[int, StageStats] = {}
    planning_cost = 0.0
    cbo_used = False
    cost = 0.0
    shuffles = 0

    def fire(phase):
        nonlocal plan, budget, planning_cost, cbo_used
        before = plan
        action = hook.callback(plan, list(stage_log), phase)
        new, applied, note, charge = apply_action(plan, action, phase, replan)
        new = aqe_reoptimize(new, stats, config)
        planning_cost += charge
        if action.kind == "cbo" and action.i == 1:
            cbo_used = True
        log.append(StepRecord(len(log), phase, len(stage_log), str(action), applied,
                              planned_shuffles(before), planned_shuffles(new), note))
        plan = new
        budget -= 1

    def maybe_fire():
        if budget <= 0:
            return
        if config.trigger == "geometric" and rng.random() >= config.trigger_q:
            return
        fire(IN)

    for _ in range(min(config.pre_steps, budget)):
        fire(PRE)

    def finish(status):
        total = cost if status == COMPLETED else config.timeout_budget
        return ExecOutcome(status, total, shuffles, expand(plan) if status == COMPLETED else plan,
                           stage_log, planning_cost, len(log), cbo_used), log

    # scan wave: all leaf stages are submitted together and finish as one event
    plan, scans = complete_scans(plan, 0)
    for st in scans:
        rows = oracle.count(st.table_set)
        s = StageStats(st.stage_id, st.table_set, rows, config.bytes_of(rows, 1), 0, 0.0)
        stats[st.stage_id] = s
        stage_log.append(s)
    next_id = len(scans)
    plan = aqe_reoptimize(plan, stats, config)
    if isinstance(plan, Join):
        maybe_fire()

    while True:
        path = _ready_join_path(plan)
        if path is None:
            break
        j: Join = _get(plan, path)
        lb = stats[j.left.stage_id].output_bytes
        rb = stats[j.right.stage_id].output_bytes
        if j.hint:
            op, build = BHJ, j.hint
        else:
            side, size = ("right", rb) if rb <= lb else ("left", lb)
            op, build = (BHJ, side) if size < config.bjt_bytes else (SMJ, None)
        j = j.with_operator(op, build)
        if op == BHJ and (lb if build == "left" else rb) > config.memory_budget:
            plan = _put(plan, path, j)
            return finish(OOM)
        out = oracle.count(j.tables)
        c, sh = stage_cost(j, stats[j.left.stage_id].output_rows, stats[j.right.stage_id].output_rows,
                           op, config, out, build or "right")
        cost += c
        shuffles += sh
        executed = replace(j, left=j.left.source or j.left, right=j.right.source or j.right)
        done = CompletedStage(next_id, j.tables, executed)
        s = StageStats(next_id, j.tables, out, config.bytes_of(out, len(j.tables)), shuffles, cost,
                       op if op == SMJ else f"BHJ({build})")
        stats[next_id] = s
        stage_log.append(s)
        next_id += 1
        plan = _put(plan, path, done)
        if cost > config.timeout_budget:
            return finish(TIMEOUT)
        plan = aqe_reoptimize(plan, stats, config)
        if isinstance(plan, Join):
            maybe_fire()

    return finish(COMPLETED)
