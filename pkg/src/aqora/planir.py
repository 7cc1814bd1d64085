"""Physical plan trees and the transformations the agent can request.

Plans are immutable.  Leaves are scans or completed stages (already executed
subtrees); ``Join`` nodes carry their equijoin conditions and a physical
operator: sort-merge (``SMJ``) or broadcast hash (``BHJ``) with a build side.
"""
from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

from aqora.errors import ConfigError, DataError, InvalidActionError
from aqora.relstore import JoinCondition, Predicate, Relation, as_mapping, equi_join, filtered_rows

SMJ = "SMJ"
BHJ = "BHJ"
UNARY_OPS = ("Filter", "Project", "Sort", "Aggregate", "Exchange")


@dataclass(frozen=True)
class Scan:
    table: str
    predicates: tuple[Predicate, ...] = ()

    @cached_property
    def tables(self) -> frozenset[str]:
        return frozenset((self.table,))


@dataclass(frozen=True)
class CompletedStage:
    stage_id: int
    table_set: frozenset[str]
    source: "PlanNode | None" = field(default=None, repr=False)

    @property
    def tables(self) -> frozenset[str]:
        return self.table_set


@dataclass(frozen=True)
class Unary:
    op: str
    child: "PlanNode"

    @property
    def tables(self) -> frozenset[str]:
        return self.child.tables


@dataclass(frozen=True)
class Join:
    left: "PlanNode"
    right: "PlanNode"
    conditions: tuple[JoinCondition, ...]
    operator: str = SMJ
    build: str | None = None
    hint: str | None = None

    def __post_init__(self):
        if self.operator == BHJ and self.build not in ("left", "right"):
            raise ValueError("BHJ needs a build side")
        if self.operator == SMJ and self.build is not None:
            object.__setattr__(self, "build", None)

    @cached_property
    def tables(self) -> frozenset[str]:
        return self.left.tables | self.right.tables

    def with_operator(self, operator: str, build: str | None = None) -> "Join":
        return replace(self, operator=operator, build=build if operator == BHJ else None)


PlanNode = Union[Scan, CompletedStage, Unary, Join]
LEAF_TYPES = (Scan, CompletedStage)


@dataclass(frozen=True)
class Action:
    """One agent action; positions are 1-based leaf positions."""

    kind: str
    i: int = 0
    j: int = 0

    def __str__(self):
        if self.kind == "cbo":
            return f"cbo({self.i})"
        if self.kind == "swap":
            return f"swap({self.i},{self.j})"
        if self.kind in ("lead", "broadcast"):
            return f"{self.kind}({self.i})"
        return "no-op"

    @classmethod
    def parse(cls, text: str) -> "Action":
        text = text.strip()
        if text == "no-op":
            return cls("no-op")
        m = re.fullmatch(r"(cbo|swap|lead|broadcast)\((\d+)(?:,(\d+))?\)", text.replace(" ", ""))
        if not m:
            raise ConfigError(f"cannot parse action {text!r}")
        kind, i, j = m.group(1), int(m.group(2)), m.group(3)
        if (kind == "swap") != (j is not None):
            raise ConfigError(f"cannot parse action {text!r}")
        return cls(kind, i, int(j) if j else 0)


NOOP = Action("no-op")


# ---------------------------------------------------------------------------
# structure readout


def has_join(node: PlanNode) -> bool:
    if isinstance(node, Join):
        return True
    if isinstance(node, Unary):
        return has_join(node.child)
    return False


def leaves(plan: PlanNode) -> list[PlanNode]:
    """Join-free maximal subtrees in left-to-right order (position i is ``leaves(p)[i-1]``)."""
    out: list[PlanNode] = []

    def walk(n):
        if isinstance(n, Join):
            walk(n.left)
            walk(n.right)
        elif isinstance(n, Unary) and has_join(n.child):
            walk(n.child)
        else:
            out.append(n)

    walk(plan)
    return out


def joins(plan: PlanNode) -> list[Join]:
    """Join nodes in post-order (children before parents, left before right)."""
    out: list[Join] = []

    def walk(n):
        if isinstance(n, Join):
            walk(n.left)
            walk(n.right)
            out.append(n)
        elif isinstance(n, Unary):
            walk(n.child)

    walk(plan)
    return out


def extract_joins(plan: PlanNode) -> tuple[list[PlanNode], frozenset[JoinCondition]]:
    conds = set()
    for j in joins(plan):
        conds.update(j.conditions)
    return leaves(plan), frozenset(conds)


def count_plan_space(n: int, shape: str = "left-deep") -> int:
    if n < 1:
        raise ConfigError("table count must be >= 1")
    if shape == "left-deep":
        return math.factorial(n)
    if shape == "bushy":
        return math.factorial(2 * n - 2) // math.factorial(n - 1)
    raise ConfigError(f"unknown plan shape {shape!r}")


def planned_shuffles(plan: PlanNode) -> int:
    """Exchanges still to run: two per pending sort-merge join."""
    return 2 * sum(1 for j in joins(plan) if j.operator == SMJ)


def expand(plan: PlanNode) -> PlanNode:
    """Replace completed stages by the subtrees they executed."""
    if isinstance(plan, CompletedStage):
        return expand(plan.source) if plan.source is not None else plan
    if isinstance(plan, Join):
        return replace(plan, left=expand(plan.left), right=expand(plan.right))
    if isinstance(plan, Unary):
        return replace(plan, child=expand(plan.child))
    return plan


def is_bushy(plan: PlanNode) -> bool:
    return any(has_join(j.left) and has_join(j.right) for j in joins(expand(plan)))


# ---------------------------------------------------------------------------
# join reordering


def _permute(n: int, action: Action) -> list[int]:
    if action.kind == "swap":
        if not 1 <= action.i < action.j <= n:
            raise InvalidActionError(f"{action} invalid for {n} leaves")
        order = list(range(n))
        order[action.i - 1], order[action.j - 1] = order[action.j - 1], order[action.i - 1]
        return order
    if action.kind == "lead":
        if not 1 <= action.i <= n:
            raise InvalidActionError(f"{action} invalid for {n} leaves")
        rest = [k for k in range(n) if k != action.i - 1]
        return [action.i - 1] + rest
    raise InvalidActionError(f"{action} is not a reordering action")


def _masks(leaf_sets: Sequence[frozenset[str]], conditions: Iterable[JoinCondition]):
    bit = {}
    for s in leaf_sets:
        for t in sorted(s):
            bit.setdefault(t, 1 << len(bit))
    lm = [sum(bit[t] for t in s) for s in leaf_sets]
    cm = []
    for c in conditions:
        a, b = c.left.table, c.right.table
        if a in bit and b in bit and a != b:
            cm.append((bit[a], bit[b]))
    return lm, cm


def order_is_connected(leaf_masks: Sequence[int], cond_masks: Sequence[tuple[int, int]],
                       order: Sequence[int]) -> bool:
    """Connectivity test of the left-deep rebuild over ``order`` (bitmask form)."""
    acc = leaf_masks[order[0]]
    for k in order[1:]:
        nxt = leaf_masks[k]
        if not any((a & acc and b & nxt) or (b & acc and a & nxt) for a, b in cond_masks):
            return False
        acc |= nxt
    return True


def reorder_is_feasible(plan: PlanNode, action: Action) -> bool:
    ls, conds = extract_joins(plan)
    order = _permute(len(ls), action)
    lm, cm = _masks([x.tables for x in ls], conds)
    return order_is_connected(lm, cm, order)


def apply_swap_or_lead(plan: PlanNode, action: Action) -> PlanNode:
    """Rebuild the plan left-deep over a permuted leaf order, never introducing a Cartesian join.

    Returns ``plan`` itself when the permutation is the identity or when some
    rebuild step has no condition connecting the partial plan to the next leaf.
    """
    ls, conds = extract_joins(plan)
    order = _permute(len(ls), action)
    if order == sorted(order):
        return plan
    operators = {}
    for j in joins(plan):
        operators[(j.left.tables, j.right.tables)] = (j.operator, j.build, j.hint)
    flip = {"left": "right", "right": "left", None: None}

    current = ls[order[0]]
    for k in order[1:]:
        nxt = ls[k]
        both = current.tables | nxt.tables
        found = sorted((c for c in conds
                        if c.tables <= both and not c.tables <= current.tables and not c.tables <= nxt.tables),
                       key=str)
        if not found:
            return plan
        op, build, hint = SMJ, None, None
        key = (current.tables, nxt.tables)
        if key in operators:
            op, build, hint = operators[key]
        elif (nxt.tables, current.tables) in operators:
            op, build, hint = operators[(nxt.tables, current.tables)]
            build, hint = flip[build], flip[hint]
        current = Join(current, nxt, tuple(found), op, build, hint)
    return current


def enclosing_join_side(plan: PlanNode, position: int) -> tuple[list[str], str] | None:
    """Path to the lowest join above leaf ``position`` and which side the leaf is on."""
    ls = leaves(plan)
    if not 1 <= position <= len(ls):
        raise InvalidActionError(f"broadcast({position}) invalid for {len(ls)} leaves")
    target = ls[position - 1]
    counter = [0]

    def walk(n, path, last_join):
        if isinstance(n, Join):
            r = walk(n.left, path + ["left"], (path, "left"))
            if r is not None:
                return r
            return walk(n.right, path + ["right"], (path, "right"))
        if isinstance(n, Unary) and has_join(n.child):
            return walk(n.child, path + ["child"], last_join)
        counter[0] += 1
        if counter[0] == position and n is target:
            return last_join if last_join is not None else ()
        return None

    found = walk(plan, [], None)
    return found if found else None


def _replace_at(node: PlanNode, path: Sequence[str], fn) -> PlanNode:
    if not path:
        return fn(node)
    step, rest = path[0], path[1:]
    return replace(node, **{step: _replace_at(getattr(node, step), rest, fn)})


def inject_broadcast_hint(plan: PlanNode, leaf_position: int) -> PlanNode:
    """Mark leaf ``leaf_position``'s side of its nearest enclosing join as the broadcast side."""
    found = enclosing_join_side(plan, leaf_position)
    if found is None:
        return plan
    path, side = found

    def mark(j: Join) -> Join:
        if j.operator == BHJ and j.build == side and j.hint == side:
            return j
        return replace(j, operator=BHJ, build=side, hint=side)

    return _replace_at(plan, path, mark)


# ---------------------------------------------------------------------------
# evaluation and digests

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.uint64, copy=True)
    x ^= x >> np.uint64(30)
    x *= _M1
    x ^= x >> np.uint64(27)
    x *= _M2
    x ^= x >> np.uint64(31)
    return x


def _salt(text: str) -> np.uint64:
    return np.uint64(int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "little"))


def evaluate_plan(plan: PlanNode, relations) -> dict[str, np.ndarray]:
    """Row-index tuples produced by executing ``plan`` as written."""
    rels = as_mapping(relations)

    def run(n):
        if isinstance(n, Scan):
            return {n.table: filtered_rows(rels[n.table], n.predicates)}
        if isinstance(n, Unary):
            return run(n.child)
        if isinstance(n, CompletedStage):
            if n.source is None:
                raise DataError(f"completed stage #{n.stage_id} has no source plan")
            return run(n.source)
        return equi_join(rels, run(n.left), run(n.right), n.conditions)

    return run(plan)


def result_multiset(plan: PlanNode, relations) -> str:
    """Order-independent digest of the multiset of joined rows."""
    rels = as_mapping(relations)
    rows = evaluate_plan(plan, rels)
    n = len(next(iter(rows.values())))
    h = np.zeros(n, dtype=np.uint64)
    with np.errstate(over="ignore"):
        for t in sorted(rows):
            rel = rels[t]
            for c in rel.columns:
                vals = rel.data[c.name][rows[t]].view(np.uint64)
                h = _mix(h ^ (vals + _salt(f"{t}.{c.name}")))
        h2 = _mix(h ^ np.uint64(0x9E3779B97F4A7C15))
        s1 = int(h.sum(dtype=np.uint64)) if n else 0
        s2 = int(h2.sum(dtype=np.uint64)) if n else 0
    return f"{n}:{s1:016x}:{s2:016x}"


# ---------------------------------------------------------------------------
# text form


def _label(n: PlanNode) -> str:
    tset = "{" + ",".join(sorted(n.tables)) + "}"
    if isinstance(n, Join):
        op = n.operator if n.operator == SMJ else f"BHJ({n.build})"
        hint = f" hint={n.hint}" if n.hint else ""
        conds = " AND ".join(str(c) for c in n.conditions)
        return f"Join {op}{hint} [{conds}] {tset}"
    if isinstance(n, Scan):
        preds = " AND ".join(str(p) for p in n.predicates)
        return f"Scan {n.table}" + (f" [{preds}]" if preds else "") + f" {tset}"
    if isinstance(n, CompletedStage):
        return f"Stage #{n.stage_id} {tset}"
    return f"{n.op} {tset}"


def plan_text(plan: PlanNode, exchanges: bool = False) -> str:
    """Stable indented text, one node per line.

    With ``exchanges`` the shuffle and broadcast exchanges implied by each
    join's operator are rendered as their own lines.
    """
    lines: list[str] = []

    def walk(n, depth):
        lines.append("  " * depth + _label(n))
        if isinstance(n, Join):
            for side in ("left", "right"):
                child = getattr(n, side)
                if exchanges and n.operator == SMJ:
                    lines.append("  " * (depth + 1) + "Exchange hashpartitioning")
                    walk(child, depth + 2)
                elif exchanges and n.build == side:
                    lines.append("  " * (depth + 1) + "BroadcastExchange")
                    walk(child, depth + 2)
                else:
                    walk(child, depth + 1)
        elif isinstance(n, Unary):
            walk(n.child, depth + 1)

    walk(plan, 0)
    return "\n".join(lines) + "\n"


def canonical(plan: PlanNode) -> str:
    """Join structure with children ordered by table set (commutativity-normal form)."""
    if isinstance(plan, Join):
        a, b = canonical(plan.left), canonical(plan.right)
        a, b = sorted((a, b))
        return f"({a} ⋈ {b})"
    if isinstance(plan, Unary):
        return canonical(plan.child)
    return "{" + ",".join(sorted(plan.tables)) + "}" if len(plan.tables) > 1 else next(iter(plan.tables))
