import numpy as np
import pytest

from aqora.errors import ConfigError, DataError, TrainingError
from aqora.nncore import (NetConfig, ParamStore, TreeBatch, TreeCNN, adam_step, check_loss, decode_checkpoint,
                          dynamic_pool, encode_checkpoint, load_checkpoint, params_from_arrays, params_to_arrays,
                          save_checkpoint, tree_conv_forward)

import gradcheck


@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_finite_differences(seed):
    worst = gradcheck.run_all(10, seed)
    assert max(worst.values()) < 1e-3, worst


def test_conv_width_mismatch_and_empty_pool():
    with pytest.raises(ConfigError):
        tree_conv_forward(np.zeros((1, 3)), np.array([-1]), np.array([-1]), np.zeros((6, 2)), np.zeros(2))
    with pytest.raises(ConfigError):
        dynamic_pool(np.zeros((0, 3)))


def test_single_node_tree_forward():
    net = TreeCNN(NetConfig(5, 4, (8, 8), 16, seed=1))
    t = gradcheck.random_tree(np.random.default_rng(0), 1, 5)
    logits, values, _ = net.forward(TreeBatch.from_trees([t]))
    assert logits.shape == (1, 4) and values.shape == (1,)
    assert np.all(np.isfinite(logits))


def test_batched_forward_equals_individual():
    rng = np.random.default_rng(2)
    net = TreeCNN(NetConfig(4, 3, (6,), 8, seed=3), dtype=np.float64)
    trees = [gradcheck.random_tree(rng, n, 4) for n in (1, 3, 7)]
    lb, vb, _ = net.forward(TreeBatch.from_trees(trees, np.float64))
    for k, t in enumerate(trees):
        l1, v1, _ = net.forward(TreeBatch.from_trees([t], np.float64))
        np.testing.assert_allclose(lb[k], l1[0], rtol=1e-12)
        np.testing.assert_allclose(vb[k], v1[0], rtol=1e-12)


def test_adam_first_step_by_hand():
    ps = ParamStore(np.float64)
    w = ps.add("w", np.array([1.0, -2.0]))
    ps.grads["w"][...] = [0.5, -4.0]
    adam_step(ps, 0.1)
    # bias-corrected first step moves each weight by lr * sign(g), up to eps
    np.testing.assert_allclose(w, [0.9, -1.9], rtol=1e-7)
    with pytest.raises(ConfigError):
        adam_step(ps, 0.0)
    ps.grads["w"][...] = [np.nan, 0]
    with pytest.raises(TrainingError):
        adam_step(ps, 0.1)


def test_check_loss():
    assert check_loss(1.5, "x") == 1.5
    with pytest.raises(TrainingError) as exc:
        check_loss(float("nan"), "critic loss", {"step": 3})
    assert exc.value.diagnostics == {"step": 3}


def test_checkpoint_round_trip(tmp_path):
    net = TreeCNN(NetConfig(5, 4, (8,), 8, seed=2))
    net.params.grads["actor.fc0.b"][...] = 1.0
    adam_step(net.params, 1e-3)
    arrays = params_to_arrays(net.params)
    save_checkpoint(tmp_path / "c.bin", arrays)
    back = params_from_arrays(load_checkpoint(tmp_path / "c.bin"))
    for k in net.params:
        assert np.array_equal(back[k], net.params[k])
        assert np.array_equal(back.m[k], net.params.m[k]) and back.t[k] == net.params.t[k]
    assert encode_checkpoint(arrays) == (tmp_path / "c.bin").read_bytes()


def test_corrupt_checkpoints(tmp_path):
    data = encode_checkpoint({"a": np.ones(3, dtype=np.float32)})
    with pytest.raises(DataError, match="magic"):
        decode_checkpoint(b"junk" + data)
    flipped = bytearray(data)
    flipped[20] ^= 0xFF
    with pytest.raises(DataError, match="checksum"):
        decode_checkpoint(bytes(flipped))
    with pytest.raises(DataError):
        decode_checkpoint(data[:-9])
    with pytest.raises(DataError, match="not found"):
        load_checkpoint(tmp_path / "missing.bin")
