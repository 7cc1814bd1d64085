import json
from dataclasses import replace

import numpy as np
import pytest

from aqora.config import LoopConfig
from aqora.errors import DataError
from aqora.nncore import load_checkpoint
from aqora.ppo import EpisodeConfig, run_episode
from aqora.stagesim import COMPLETED
from aqora.training import ModelSpec, Trainer, curriculum_stage, episode_order, model_from_checkpoint, new_model


def spec_for(world):
    wl = world["workload"]
    return ModelSpec(wl.n_max, wl.vocab, (8, 8), 16, seed=1)


LOOP = LoopConfig(episodes=8, batch_size=4, checkpoint_every=4, conv=(8, 8), head_hidden=16)


def test_curriculum_schedule():
    stages = [curriculum_stage(e, 100) for e in range(100)]
    assert stages[:10] == [1] * 10 and stages[10:40] == [2] * 30 and stages[40:] == [3] * 60
    assert curriculum_stage(0, 100, enabled=False) == 3
    assert curriculum_stage(0, 0) == 3


def test_episode_order_covers_each_pass():
    order = episode_order(7, 20, 3)
    assert sorted(order[:7]) == list(range(7)) and sorted(order[7:14]) == list(range(7))
    assert order == episode_order(7, 20, 3) and order != episode_order(7, 20, 4)


def test_run_episode_records_decisions(small_world):
    spec = spec_for(small_world)
    net = new_model(spec)
    q = small_world["train"][0]
    cfg = EpisodeConfig(spec.n_max, spec.vocab, 3, max_steps=3)
    traj, outcome, log = run_episode(q, net, cfg, "train", np.random.default_rng(0))
    assert traj.k == len(log) == outcome.decisions <= 3
    for tr, rec in zip(traj.transitions, log):
        assert tr.mask[tr.action] and tr.label == rec.action
        assert tr.reward == (-rec.extra_shuffles / 10.0 if rec.applied else 0.0)
    if outcome.status == COMPLETED:
        assert traj.t_execute == pytest.approx(outcome.total_cost + outcome.planning_cost)
    g1 = run_episode(q, net, cfg, "greedy")
    g2 = run_episode(q, net, cfg, "greedy")
    assert [s.action for s in g1[2]] == [s.action for s in g2[2]]
    with pytest.raises(ValueError):
        run_episode(q, net, cfg, "train")


def test_training_log_and_checkpoint(small_world, tmp_path):
    trainer = Trainer(small_world["train"], spec_for(small_world), LOOP, seed=4)
    seen = []
    net, result = trainer.run(tmp_path / "c.bin", tmp_path / "log.jsonl", on_episode=seen.append)
    lines = [json.loads(x) for x in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["episode"] for r in lines] == list(range(8)) == [r["episode"] for r in seen]
    assert {"episode", "query_id", "stage", "actions", "applied", "rewards", "return", "status", "cost",
            "losses"} == set(lines[0])
    assert [r["losses"] is not None for r in lines] == [False, False, False, True] * 2
    assert [r["stage"] for r in lines] == [curriculum_stage(e, 8) for e in range(8)]
    assert result.updates == 2 and len(result.returns) == 8
    back, spec, episode = model_from_checkpoint(tmp_path / "c.bin", spec_for(small_world).vocab)
    assert episode == 8
    for k in net.params:
        assert np.array_equal(back.params[k], net.params[k])


def test_resume_matches_uninterrupted_run(small_world, tmp_path):
    spec = spec_for(small_world)
    Trainer(small_world["train"], spec, LOOP, seed=4).run(tmp_path / "full.bin", tmp_path / "full.jsonl")

    class Stop(Exception):
        pass

    def interrupt(rec):
        # the first batch has been checkpointed by the time episode 4 is reported
        if rec["episode"] == 4:
            raise Stop

    with pytest.raises(Stop):
        Trainer(small_world["train"], spec, LOOP, seed=4).run(tmp_path / "part.bin", tmp_path / "part.jsonl",
                                                              on_episode=interrupt)
    assert load_checkpoint(tmp_path / "part.bin")["meta/episode"][0] == 4
    Trainer(small_world["train"], spec, LOOP, seed=4).run(tmp_path / "part.bin", tmp_path / "part.jsonl")
    assert (tmp_path / "part.bin").read_bytes() == (tmp_path / "full.bin").read_bytes()
    assert (tmp_path / "part.jsonl").read_text() == (tmp_path / "full.jsonl").read_text()


def test_zero_episodes_saves_initial_model(small_world, tmp_path):
    spec = spec_for(small_world)
    net, result = Trainer(small_world["train"], spec, replace(LOOP, episodes=0), seed=4).run(tmp_path / "c.bin")
    assert result.updates == 0
    back, _, episode = model_from_checkpoint(tmp_path / "c.bin", spec.vocab)
    assert episode == 0
    for k in net.params:
        assert np.array_equal(back.params[k], new_model(spec).params[k])


def test_layout_mismatch_and_empty_split(small_world, tmp_path):
    spec = spec_for(small_world)
    Trainer(small_world["train"], spec, replace(LOOP, episodes=0), seed=4).run(tmp_path / "c.bin")
    other = replace(spec, conv=(4,))
    with pytest.raises(DataError):
        Trainer(small_world["train"], other, LOOP, seed=4).run(tmp_path / "c.bin")
    with pytest.raises(DataError):
        Trainer([], spec, LOOP, seed=4)
