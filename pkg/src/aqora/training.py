"""Training loop: curriculum schedule, batched updates, resumable checkpoints, per-episode log."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from aqora import agent
from aqora.config import LoopConfig
from aqora.encode import width
from aqora.errors import DataError
from aqora.nncore import (NetConfig, TreeCNN, load_checkpoint, params_from_arrays, params_to_arrays,
                          save_checkpoint)
from aqora.ppo import EpisodeConfig, compute_return, ppo_update, run_episode

log = logging.getLogger(__name__)


def curriculum_stage(episode: int, total: int, bounds=(0.1, 0.4), enabled: bool = True) -> int:
    if not enabled or total <= 0:
        return 3
    frac = episode / total
    if frac < bounds[0]:
        return 1
    return 2 if frac < bounds[1] else 3


@dataclass(frozen=True)
class ModelSpec:
    n_max: int
    vocab: tuple[str, ...]
    conv: tuple[int, ...] = (64, 128, 64)
    head_hidden: int = 256
    seed: int = 0

    def net_config(self) -> NetConfig:
        return NetConfig(width(self.n_max), agent.action_dim(self.n_max), tuple(self.conv), self.head_hidden,
                         self.seed)

    def meta_arrays(self) -> dict[str, np.ndarray]:
        return {"meta/n_max": np.array([self.n_max], np.float32),
                "meta/conv": np.array(self.conv, np.float32),
                "meta/head_hidden": np.array([self.head_hidden], np.float32)}


def new_model(spec: ModelSpec) -> TreeCNN:
    return TreeCNN(spec.net_config())


def checkpoint_arrays(net: TreeCNN, spec: ModelSpec, episode: int) -> dict[str, np.ndarray]:
    arrays = params_to_arrays(net.params)
    arrays.update(spec.meta_arrays())
    arrays["meta/episode"] = np.array([episode], np.float32)
    return arrays


def model_from_checkpoint(path, vocab: Sequence[str]) -> tuple[TreeCNN, ModelSpec, int]:
    """Rebuild the network saved at ``path``; returns (net, spec, episodes completed)."""
    arrays = load_checkpoint(path)
    try:
        n_max = int(arrays["meta/n_max"][0])
        conv = tuple(int(x) for x in arrays["meta/conv"])
        hidden = int(arrays["meta/head_hidden"][0])
        episode = int(arrays["meta/episode"][0])
    except KeyError as exc:
        raise DataError(f"checkpoint {path} lacks metadata {exc}") from None
    spec = ModelSpec(n_max, tuple(vocab), conv, hidden)
    net = TreeCNN(spec.net_config(), params_from_arrays(arrays))
    expected = new_model(spec).params
    for k in expected:
        if k not in net.params.values or net.params[k].shape != expected[k].shape:
            raise DataError(f"checkpoint {path} does not match the model layout at {k}")
    return net, spec, episode


def episode_order(n_queries: int, episodes: int, seed: int) -> list[int]:
    """Query index per episode: a fresh seeded permutation for every pass over the training set."""
    out: list[int] = []
    p = 0
    while len(out) < episodes:
        out.extend(np.random.default_rng([seed, 404, p]).permutation(n_queries).tolist())
        p += 1
    return out[:episodes]


@dataclass
class TrainResult:
    episodes: int
    updates: int
    returns: list[float]


class Trainer:
    def __init__(self, queries: Sequence, spec: ModelSpec, loop: LoopConfig, seed: int,
                 max_steps: int = 3):
        if not queries:
            raise DataError("training split is empty")
        self.queries = list(queries)
        self.spec = spec
        self.loop = loop
        self.seed = seed
        self.max_steps = max_steps

    def episode_config(self, stage: int) -> EpisodeConfig:
        return EpisodeConfig(self.spec.n_max, self.spec.vocab, stage, frozenset(self.loop.kinds), self.max_steps)

    def run(self, checkpoint: str | Path | None = None, log_path: str | Path | None = None,
            resume: bool = True, on_episode: Callable[[dict], None] | None = None) -> tuple[TreeCNN, TrainResult]:
        loop = self.loop
        start = 0
        net = None
        if checkpoint is not None and resume and Path(checkpoint).exists():
            net, saved, start = model_from_checkpoint(checkpoint, self.spec.vocab)
            if (saved.n_max, saved.conv, saved.head_hidden) != (self.spec.n_max, tuple(self.spec.conv),
                                                                 self.spec.head_hidden):
                raise DataError(f"checkpoint {checkpoint} was trained with a different model layout")
            log.info("resuming from episode %d", start)
        if net is None:
            net = new_model(self.spec)
        log_file = None
        if log_path is not None:
            log_path = Path(log_path)
            log_path.parent.mkdir(parents=True, exist_ok=True)
            kept = []
            if start and log_path.exists():
                kept = [ln for ln in log_path.read_text().splitlines() if json.loads(ln)["episode"] < start]
            log_file = open(log_path, "w")
            for ln in kept:
                log_file.write(ln + "\n")
        order = episode_order(len(self.queries), loop.episodes, self.seed)
        returns, updates, batch, pending = [], 0, [], []
        try:
            for ep in range(start, loop.episodes):
                stage = curriculum_stage(ep, loop.episodes, loop.stage_bounds, loop.curriculum)
                query = self.queries[order[ep]]
                rng = np.random.default_rng([self.seed, 505, ep])
                traj, outcome, steps = run_episode(query, net, self.episode_config(stage), "train", rng)
                R = compute_return(traj, loop.ppo.gamma, loop.ppo.failure_penalty)
                returns.append(R)
                batch.append(traj)
                rec = {"episode": ep, "query_id": query.query_id, "stage": stage,
                       "actions": [s.action for s in steps], "applied": [s.applied for s in steps],
                       "rewards": traj.rewards, "return": R, "status": outcome.status,
                       "cost": outcome.total_cost, "losses": None}
                pending.append(rec)
                done = ep + 1
                if len(batch) == loop.batch_size or done == loop.episodes:
                    report = ppo_update(batch, net, loop.ppo)
                    updates += 1
                    rec["losses"] = report.as_dict()
                    batch = []
                    for r in pending:
                        if log_file:
                            log_file.write(json.dumps(r, sort_keys=True) + "\n")
                        if on_episode:
                            on_episode(r)
                    pending = []
                    if checkpoint is not None and (done % loop.checkpoint_every < loop.batch_size
                                                   or done == loop.episodes):
                        save_checkpoint(checkpoint, checkpoint_arrays(net, self.spec, done))
        finally:
            if log_file:
                log_file.close()
        if checkpoint is not None and (loop.episodes == 0 or start >= loop.episodes):
            save_checkpoint(checkpoint, checkpoint_arrays(net, self.spec, max(start, loop.episodes)))
        return net, TrainResult(loop.episodes, updates, returns)
