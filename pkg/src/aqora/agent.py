"""Action space layout, legality masking with curriculum stages, and masked sampling."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from itertools import combinations
from math import comb

import numpy as np

from aqora.errors import ConfigError, InvalidActionError
from aqora.nncore import TreeBatch, TreeCNN
from aqora.planir import NOOP, Action, PlanNode, _masks, extract_joins, order_is_connected
from aqora.stagesim import PRE

ALL_KINDS = frozenset({"cbo", "swap", "lead", "broadcast", "no-op"})


def action_dim(n_max: int) -> int:
    if n_max < 2:
        raise ConfigError("n_max must be >= 2")
    return 2 + (n_max - 1) + comb(n_max, 2) + n_max + 1


@dataclass(frozen=True)
class ActionLayout:
    """Fixed action vector: cbo(1), cbo(0), swaps (i<j, lexicographic), lead(2..n), broadcast(1..n), no-op."""

    n_max: int

    def __post_init__(self):
        action_dim(self.n_max)

    @cached_property
    def actions(self) -> tuple[Action, ...]:
        n = self.n_max
        acts = [Action("cbo", 1), Action("cbo", 0)]
        acts += [Action("swap", i, j) for i, j in combinations(range(1, n + 1), 2)]
        acts += [Action("lead", i) for i in range(2, n + 1)]
        acts += [Action("broadcast", i) for i in range(1, n + 1)]
        acts.append(NOOP)
        return tuple(acts)

    @cached_property
    def index(self) -> dict[Action, int]:
        return {a: k for k, a in enumerate(self.actions)}

    @property
    def dim(self) -> int:
        return len(self.actions)

    @property
    def noop(self) -> int:
        return self.dim - 1

    def offsets(self) -> dict[str, int]:
        n = self.n_max
        return {"cbo": 0, "swap": 2, "lead": 2 + comb(n, 2), "broadcast": 2 + comb(n, 2) + n - 1,
                "no-op": self.dim - 1}

    def action(self, k: int) -> Action:
        return self.actions[k]

    def id_of(self, action: Action | str) -> int:
        if isinstance(action, str):
            action = Action.parse(action)
        try:
            return self.index[action]
        except KeyError:
            raise InvalidActionError(f"{action} is outside the layout for n_max={self.n_max}") from None


def legality_mask(plan: PlanNode, phase: str, curriculum_stage: int, layout: ActionLayout,
                  kinds: frozenset[str] = ALL_KINDS) -> np.ndarray:
    """Binary mask over ``layout``; no-op is always legal.

    Curriculum stage 1 allows only the CBO switch, stage 2 adds structural
    actions during execution, stage 3 allows every valid action.
    """
    if curriculum_stage not in (1, 2, 3):
        raise ConfigError(f"curriculum stage must be 1, 2 or 3, got {curriculum_stage}")
    mask = np.zeros(layout.dim, dtype=bool)
    mask[layout.noop] = True
    pre = phase == PRE
    if pre and "cbo" in kinds:
        mask[0] = mask[1] = True
    structural = curriculum_stage == 3 or (curriculum_stage == 2 and not pre)
    if not structural:
        return mask
    ls, conds = extract_joins(plan)
    n = min(len(ls), layout.n_max)
    if n < 2:
        return mask
    lm, cm = _masks([x.tables for x in ls], conds)
    total = len(ls)
    base = list(range(total))
    idx = layout.index
    if "swap" in kinds:
        for i, j in combinations(range(1, n + 1), 2):
            order = base.copy()
            order[i - 1], order[j - 1] = order[j - 1], order[i - 1]
            if order_is_connected(lm, cm, order):
                mask[idx[Action("swap", i, j)]] = True
    if "lead" in kinds:
        for i in range(2, n + 1):
            order = [i - 1] + [k for k in base if k != i - 1]
            if order_is_connected(lm, cm, order):
                mask[idx[Action("lead", i)]] = True
    if "broadcast" in kinds:
        for i in range(1, n + 1):
            mask[idx[Action("broadcast", i)]] = True
    return mask


def masked_probs(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax restricted to legal entries; illegal entries are exactly zero."""
    if not mask.any():
        raise InvalidActionError("mask has no legal action")
    z = np.asarray(logits, dtype=np.float64)
    top = z[mask].max()
    e = np.where(mask, np.exp(np.where(mask, z - top, 0.0)), 0.0)
    return e / e.sum()


def entropy(p: np.ndarray) -> float:
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def sample_masked(logits: np.ndarray, mask: np.ndarray, rng: np.random.Generator | None,
                  greedy: bool = False) -> tuple[int, float, float]:
    p = masked_probs(logits, mask)
    legal = np.flatnonzero(mask)
    if greedy:
        k = int(legal[np.argmax(p[legal])])
    else:
        cp = np.cumsum(p[legal])
        u = rng.random() * cp[-1]
        k = int(legal[min(int(np.searchsorted(cp, u, side="right")), len(legal) - 1)])
    return k, float(np.log(p[k])), entropy(p)


def evaluate(net: TreeCNN, tree) -> tuple[np.ndarray, float]:
    logits, values, _ = net.forward(TreeBatch.from_trees([tree], net.dtype))
    return logits[0], float(values[0])


def select_action(tree, net: TreeCNN, mask: np.ndarray, rng: np.random.Generator | None,
                  greedy: bool = False) -> tuple[int, float, float]:
    """Sample (or argmax) from the masked actor distribution: (action id, log-prob, entropy)."""
    logits, _ = evaluate(net, tree)
    return sample_masked(logits, mask, rng, greedy)


def state_value(tree, net: TreeCNN) -> float:
    return evaluate(net, tree)[1]
