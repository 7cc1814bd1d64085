"""Plan trees to vector trees.

Each node becomes ``type one-hot || table bitmap || (log1p rows, log1p bytes)``
with -1 in the statistic slots when nothing has been observed yet.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from aqora.planir import CompletedStage, Join, PlanNode, Scan, Unary

NODE_TYPES = ("Join", "Scan", "CompletedStage", "BroadcastStage")
N_TYPES = len(NODE_TYPES)


def width(n_max: int) -> int:
    return N_TYPES + n_max + 2


@dataclass(frozen=True)
class VectorTree:
    """Nodes in post-order: children always precede their parent; -1 marks a missing child."""

    x: np.ndarray
    left: np.ndarray
    right: np.ndarray

    @property
    def size(self) -> int:
        return len(self.x)

    def __eq__(self, other):
        return (isinstance(other, VectorTree) and np.array_equal(self.x, other.x)
                and np.array_equal(self.left, other.left) and np.array_equal(self.right, other.right))

    __hash__ = None


def compress_tree(plan: PlanNode) -> PlanNode:
    """Drop every unary operator, keeping joins and leaves in their original order."""
    if isinstance(plan, Unary):
        return compress_tree(plan.child)
    if isinstance(plan, Join):
        left, right = compress_tree(plan.left), compress_tree(plan.right)
        if left is plan.left and right is plan.right:
            return plan
        return replace(plan, left=left, right=right)
    return plan


def encode_node(u: PlanNode, stats=None, n_max: int = 8, vocab: Mapping[str, int] | None = None,
                broadcast: bool = False) -> np.ndarray:
    v = np.zeros(width(n_max), dtype=np.float32)
    if isinstance(u, Join):
        v[0] = 1
    elif isinstance(u, CompletedStage):
        v[3 if broadcast else 2] = 1
    else:
        v[1] = 1
    if vocab is None:
        vocab = {}
    for t in u.tables:
        k = vocab.get(t)
        if k is not None and k < n_max:
            v[N_TYPES + k] = 1
    if stats is not None:
        v[-2] = math.log1p(stats.output_rows)
        v[-1] = math.log1p(stats.output_bytes)
    else:
        v[-2] = v[-1] = -1
    return v


def encode_state(plan: PlanNode, stats: Sequence | Mapping | None, n_max: int,
                 vocab: Mapping[str, int]) -> VectorTree:
    plan = compress_tree(plan)
    if stats is None:
        by_id = {}
    elif isinstance(stats, Mapping):
        by_id = dict(stats)
    else:
        by_id = {s.stage_id: s for s in stats}
    rows, lefts, rights = [], [], []

    def walk(n, broadcast):
        if isinstance(n, Join):
            li = walk(n.left, n.build == "left")
            ri = walk(n.right, n.build == "right")
        else:
            li = ri = -1
        st = by_id.get(n.stage_id) if isinstance(n, CompletedStage) else None
        rows.append(encode_node(n, st, n_max, vocab, broadcast))
        lefts.append(li)
        rights.append(ri)
        return len(rows) - 1

    walk(plan, False)
    return VectorTree(np.stack(rows), np.asarray(lefts, dtype=np.int64), np.asarray(rights, dtype=np.int64))


def dump(tree: VectorTree) -> str:
    """Indented text of a vector tree, root first."""
    lines = []

    def walk(i, depth):
        vec = " ".join(f"{x:g}" for x in tree.x[i])
        lines.append("  " * depth + f"[{vec}]")
        if tree.left[i] >= 0:
            walk(int(tree.left[i]), depth + 1)
        if tree.right[i] >= 0:
            walk(int(tree.right[i]), depth + 1)

    walk(tree.size - 1, 0)
    return "\n".join(lines) + "\n"
