"""Episode collection and clipped-surrogate actor-critic updates.

A trajectory holds one query's decisions.  Each decision earns a shaping
reward of minus the extra planned shuffles it introduced, over ten; the
episode ends with minus the square root of the simulated end-to-end time.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from aqora import agent
from aqora.encode import VectorTree, encode_state
from aqora.errors import TrainingError
from aqora.nncore import TreeBatch, TreeCNN, adam_step, check_loss
from aqora.stagesim import COMPLETED, ExecOutcome, ReplanHook

FAILURE_PENALTY = -math.sqrt(300.0)


@dataclass(frozen=True)
class TrainConfig:
    clip: float = 0.2
    entropy_coef: float = 0.01
    epochs: int = 4
    actor_lr: float = 3e-4
    critic_lr: float = 1e-3
    gamma: float = 1.0
    failure_penalty: float = FAILURE_PENALTY
    # weight of the critic loss gradient inside the shared trunk
    value_coef: float = 0.5

    def __post_init__(self):
        if not 0 < self.clip < 1:
            raise ValueError("clip must lie in (0, 1)")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class Transition:
    tree: VectorTree
    mask: np.ndarray
    action: int
    logp_old: float
    value_old: float
    reward: float = 0.0
    phase: str = ""
    label: str = ""


@dataclass
class Trajectory:
    transitions: list[Transition]
    t_execute: float
    failed: bool = False
    query_id: str = ""
    terminal: VectorTree | None = None

    @property
    def k(self) -> int:
        return len(self.transitions)

    @property
    def rewards(self) -> list[float]:
        return [t.reward for t in self.transitions]


def terminal_value(traj: Trajectory, penalty: float = FAILURE_PENALTY) -> float:
    return penalty if traj.failed else -math.sqrt(max(traj.t_execute, 0.0))


def compute_return(traj: Trajectory, gamma: float = 1.0, penalty: float = FAILURE_PENALTY) -> float:
    if traj.failed:
        return penalty
    return sum(gamma ** i * r for i, r in enumerate(traj.rewards)) - math.sqrt(traj.t_execute)


def compute_state_targets(traj: Trajectory, gamma: float = 1.0,
                          penalty: float = FAILURE_PENALTY) -> list[float]:
    """Observed value of every state s_0..s_k: discounted future shaping rewards plus the terminal value."""
    end = terminal_value(traj, penalty)
    out = [end]
    acc = 0.0
    for r in reversed(traj.rewards):
        acc = r + gamma * acc
        out.append(acc + end)
    return out[::-1]


def compute_action_values(traj: Trajectory, values: Sequence[float]) -> list[float]:
    """``r_{t+1} + v(s_{t+1}) - v(s_t)`` for each step, with a trailing 0 for the terminal state."""
    if len(values) != traj.k + 1:
        raise ValueError(f"need {traj.k + 1} state values, got {len(values)}")
    r = traj.rewards
    return [r[t] + values[t + 1] - values[t] for t in range(traj.k)] + [0.0]


@dataclass
class LossReport:
    clip: float
    entropy: float
    actor: float
    critic: float
    epochs: list[dict] = field(default_factory=list)
    n_signals: int = 0

    def as_dict(self):
        return {"clip": self.clip, "entropy": self.entropy, "actor": self.actor, "critic": self.critic}


def _batch(trajs: Sequence[Trajectory], cfg: TrainConfig):
    items = []
    for traj in trajs:
        if traj.k == 0:
            continue
        values = [t.value_old for t in traj.transitions] + [terminal_value(traj, cfg.failure_penalty)]
        q = compute_action_values(traj, values)
        targets = compute_state_targets(traj, cfg.gamma, cfg.failure_penalty)
        w = 1.0 / (traj.k * sum(1 for x in trajs if x.k))
        for t, tr in enumerate(traj.transitions):
            items.append((tr, q[t], targets[t], w))
    return items


def losses_and_grads(net: TreeCNN, items, cfg: TrainConfig, batch: TreeBatch | None = None):
    """Loss components and their gradients w.r.t. logits and values for one epoch."""
    if batch is None:
        batch = TreeBatch.from_trees([it[0].tree for it in items], net.dtype)
    logits, values, cache = net.forward(batch)
    dlogits = np.zeros(logits.shape, dtype=np.float64)
    dvalues = np.zeros(values.shape, dtype=np.float64)
    l_clip = l_ent = l_crit = 0.0
    for b, (tr, q, target, w) in enumerate(items):
        p = agent.masked_probs(logits[b], tr.mask)
        legal = tr.mask
        ratio = p[tr.action] / math.exp(tr.logp_old)
        clipped = min(max(ratio, 1 - cfg.clip), 1 + cfg.clip)
        unclipped_branch = ratio * q <= clipped * q
        l_clip -= w * min(ratio * q, clipped * q)
        if unclipped_branch:
            dratio = -w * q
            g = -p * ratio
            g[tr.action] += ratio
            dlogits[b] += dratio * np.where(legal, g, 0.0)
        logp = np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), 0.0)
        neg_h = float((p * logp).sum())
        l_ent += w * neg_h
        dlogits[b] += cfg.entropy_coef * w * np.where(legal, p * (logp - neg_h), 0.0)
        v = float(values[b])
        l_crit += w * (v - target) ** 2
        dvalues[b] = 2 * w * (v - target)
    report = {"clip": l_clip, "entropy": l_ent, "actor": l_clip + cfg.entropy_coef * l_ent, "critic": l_crit}
    return report, dlogits, dvalues, cache


def ppo_update(trajs: Sequence[Trajectory], net: TreeCNN, cfg: TrainConfig = TrainConfig()) -> LossReport:
    """Run ``cfg.epochs`` clipped-surrogate epochs on the collected trajectories, in place."""
    items = _batch(trajs, cfg)
    if not items:
        return LossReport(0.0, 0.0, 0.0, 0.0, [], 0)
    batch = TreeBatch.from_trees([it[0].tree for it in items], net.dtype)
    params = net.params
    actor_names = [k for k in params if not k.startswith("critic.")]
    critic_names = [k for k in params if k.startswith("critic.")]
    epochs = []
    for _ in range(cfg.epochs):
        report, dlogits, dvalues, cache = losses_and_grads(net, items, cfg, batch)
        diag = {"report": report, "queries": [t.query_id for t in trajs],
                "actions": [[x.label for x in t.transitions] for t in trajs]}
        for name, val in report.items():
            check_loss(val, f"{name} loss", diag)
        params.zero_grad()
        net.backward(cache, dlogits, dvalues, trunk_value_scale=cfg.value_coef)
        adam_step(params, cfg.actor_lr, actor_names)
        adam_step(params, cfg.critic_lr, critic_names)
        epochs.append(report)
    mean = {k: float(np.mean([e[k] for e in epochs])) for k in epochs[0]}
    return LossReport(mean["clip"], mean["entropy"], mean["actor"], mean["critic"], epochs, len(items))


@dataclass(frozen=True)
class EpisodeConfig:
    n_max: int
    vocab: tuple[str, ...]
    curriculum_stage: int = 3
    kinds: frozenset[str] = agent.ALL_KINDS
    max_steps: int = 3


def run_episode(query, net: TreeCNN, cfg: EpisodeConfig, mode: str = "train",
                rng: np.random.Generator | None = None):
    """Execute ``query`` with the network steering; returns (trajectory, outcome, step log)."""
    layout = agent.ActionLayout(cfg.n_max)
    vocab = {t: i for i, t in enumerate(cfg.vocab)}
    greedy = mode == "greedy"
    if not greedy and rng is None:
        raise ValueError("train mode needs a random generator")
    transitions: list[Transition] = []

    def callback(plan, stats, phase):
        mask = agent.legality_mask(plan, phase, cfg.curriculum_stage, layout, cfg.kinds)
        tree = encode_state(plan, stats, cfg.n_max, vocab)
        logits, value = agent.evaluate(net, tree)
        k, logp, _ = agent.sample_masked(logits, mask, rng, greedy)
        transitions.append(Transition(tree, mask, k, logp, value, phase=phase, label=str(layout.action(k))))
        return layout.action(k)

    hook = ReplanHook(callback, cfg.max_steps)
    outcome, log = query.execute(query.initial_plan(), hook)
    for tr, rec in zip(transitions, log):
        tr.reward = -rec.extra_shuffles / 10.0 if rec.applied else 0.0
    failed = outcome.status != COMPLETED
    t_total = outcome.total_cost + outcome.planning_cost
    traj = Trajectory(transitions, t_total if not failed else query.sim.timeout_budget, failed, query.query_id)
    return traj, outcome, log
