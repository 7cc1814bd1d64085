"""Tree-convolution actor-critic network with hand-written gradients.

Everything is plain numpy.  Layers are pairs of forward/backward functions;
``TreeCNN`` chains them into a shared trunk (tree convolutions + max pooling)
with separate actor and critic heads.
"""
from __future__ import annotations

import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from aqora.errors import ConfigError, DataError, TrainingError

SLOPE = 0.01


class ParamStore:
    """Named parameter arrays with matching gradient buffers and Adam moments."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        value = np.array(value, dtype=self.dtype)
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)
        self.t[name] = 0
        return value

    def __getitem__(self, name):
        return self.values[name]

    def __iter__(self):
        return iter(self.values)

    def zero_grad(self):
        for g in self.grads.values():
            g[...] = 0

    def num_params(self) -> int:
        return int(sum(v.size for v in self.values.values()))

    def copy(self, dtype=None) -> "ParamStore":
        out = ParamStore(dtype or self.dtype)
        for k in self.values:
            out.values[k] = self.values[k].astype(out.dtype, copy=True)
            out.grads[k] = self.grads[k].astype(out.dtype, copy=True)
            out.m[k] = self.m[k].astype(out.dtype, copy=True)
            out.v[k] = self.v[k].astype(out.dtype, copy=True)
            out.t[k] = self.t[k]
        return out

    def check_finite(self):
        for k, v in self.values.items():
            if not np.all(np.isfinite(v)):
                raise TrainingError(f"parameter {k} became non-finite", {"param": k})


# ---------------------------------------------------------------------------
# layers


def leaky(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, z, SLOPE * z)


def leaky_backward(dy: np.ndarray, z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, dy, SLOPE * dy)


def dense_forward(x, W, b):
    return x @ W + b


def dense_backward(dy, x, W):
    return dy @ W.T, x.T @ dy, dy.sum(axis=0)


@dataclass
class TreeBatch:
    """Several vector trees stacked into one node array.

    ``left``/``right`` index into the stacked rows (-1 for no child) and
    ``starts`` gives the first row of each tree.
    """

    x: np.ndarray
    left: np.ndarray
    right: np.ndarray
    starts: np.ndarray

    @classmethod
    def from_trees(cls, trees: Sequence, dtype=np.float32) -> "TreeBatch":
        xs, ls, rs, starts = [], [], [], []
        off = 0
        for t in trees:
            xs.append(np.asarray(t.x, dtype=dtype))
            ls.append(np.where(t.left >= 0, t.left + off, -1))
            rs.append(np.where(t.right >= 0, t.right + off, -1))
            starts.append(off)
            off += len(t.x)
        return cls(np.concatenate(xs), np.concatenate(ls).astype(np.int64),
                   np.concatenate(rs).astype(np.int64), np.asarray(starts, dtype=np.int64))

    @property
    def n_trees(self) -> int:
        return len(self.starts)


def _gather(h, idx):
    pad = np.vstack([h, np.zeros((1, h.shape[1]), dtype=h.dtype)])
    return pad[idx]  # -1 selects the zero row


def tree_conv_forward(h, left, right, W, b):
    """Per node: ``[self || left child || right child] @ W + b`` with zeros for missing children."""
    w = h.shape[1]
    if W.shape[0] != 3 * w:
        raise ConfigError(f"tree conv expects input width {W.shape[0] // 3}, got {w}")
    cat = np.hstack([h, _gather(h, left), _gather(h, right)])
    return cat @ W + b, cat


def tree_conv_backward(dz, cat, left, right, W):
    w = W.shape[0] // 3
    dcat = dz @ W.T
    n = len(dz)
    dpad = np.zeros((n + 1, w), dtype=dz.dtype)
    dpad[:n] += dcat[:, :w]
    np.add.at(dpad, left, dcat[:, w:2 * w])
    np.add.at(dpad, right, dcat[:, 2 * w:])
    return dpad[:n], cat.T @ dz, dz.sum(axis=0)


def dynamic_pool(h: np.ndarray, starts: np.ndarray | None = None):
    """Columnwise max over each tree's nodes; returns (pooled, argmax rows)."""
    if len(h) == 0:
        raise ConfigError("cannot pool an empty tree")
    if starts is None:
        starts = np.zeros(1, dtype=np.int64)
    ends = list(starts[1:]) + [len(h)]
    pooled = np.empty((len(starts), h.shape[1]), dtype=h.dtype)
    arg = np.empty((len(starts), h.shape[1]), dtype=np.int64)
    for i, (s, e) in enumerate(zip(starts, ends)):
        if e <= s:
            raise ConfigError("cannot pool an empty tree")
        a = np.argmax(h[s:e], axis=0)
        arg[i] = a + s
        pooled[i] = h[s:e][a, np.arange(h.shape[1])]
    return pooled, arg


def dynamic_pool_backward(dp, arg, n_nodes):
    dh = np.zeros((n_nodes, dp.shape[1]), dtype=dp.dtype)
    cols = np.arange(dp.shape[1])
    for i in range(len(dp)):
        dh[arg[i], cols] += dp[i]
    return dh


# ---------------------------------------------------------------------------
# network


@dataclass(frozen=True)
class NetConfig:
    in_width: int
    n_actions: int
    conv: tuple[int, ...] = (64, 128, 64)
    head_hidden: int = 256
    seed: int = 0
    actor_out_scale: float = 0.01


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: NetConfig, dtype=np.float32) -> ParamStore:
    rng = np.random.default_rng(cfg.seed)
    ps = ParamStore(dtype)
    width = cfg.in_width
    for i, h in enumerate(cfg.conv):
        ps.add(f"trunk.conv{i}.W", _uniform(rng, 3 * width, (3 * width, h)))
        ps.add(f"trunk.conv{i}.b", np.zeros(h))
        width = h
    hid = cfg.head_hidden
    ps.add("actor.fc0.W", _uniform(rng, width, (width, hid)))
    ps.add("actor.fc0.b", np.zeros(hid))
    ps.add("actor.fc1.W", _uniform(rng, hid, (hid, cfg.n_actions)) * cfg.actor_out_scale)
    ps.add("actor.fc1.b", np.zeros(cfg.n_actions))
    ps.add("critic.fc0.W", _uniform(rng, width, (width, hid)))
    ps.add("critic.fc0.b", np.zeros(hid))
    ps.add("critic.fc1.W", _uniform(rng, hid, (hid, 1)))
    ps.add("critic.fc1.b", np.zeros(1))
    return ps


class TreeCNN:
    """Shared tree-conv trunk feeding an actor (logits) head and a critic (scalar) head."""

    def __init__(self, cfg: NetConfig, params: ParamStore | None = None, dtype=np.float32):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, dtype)

    @property
    def dtype(self):
        return self.params.dtype

    def forward(self, batch: TreeBatch):
        p = self.params.values
        cache = {"batch": batch, "z": [], "cat": []}
        h = batch.x.astype(self.dtype, copy=False)
        for i in range(len(self.cfg.conv)):
            z, cat = tree_conv_forward(h, batch.left, batch.right, p[f"trunk.conv{i}.W"], p[f"trunk.conv{i}.b"])
            cache["z"].append(z)
            cache["cat"].append(cat)
            h = leaky(z)
        pooled, arg = dynamic_pool(h, batch.starts)
        cache["pooled"], cache["arg"], cache["n"] = pooled, arg, len(h)
        out = {}
        for head in ("actor", "critic"):
            z0 = dense_forward(pooled, p[f"{head}.fc0.W"], p[f"{head}.fc0.b"])
            a0 = leaky(z0)
            y = dense_forward(a0, p[f"{head}.fc1.W"], p[f"{head}.fc1.b"])
            cache[head] = (z0, a0)
            out[head] = y
        return out["actor"], out["critic"][:, 0], cache

    def backward(self, cache, dlogits=None, dvalue=None, trunk_value_scale: float = 1.0):
        """Accumulate parameter gradients for upstream gradients on logits and values.

        ``trunk_value_scale`` scales the critic gradient where it enters the
        shared trunk; the critic head itself always receives the full gradient.
        """
        p, g = self.params.values, self.params.grads
        pooled = cache["pooled"]
        dpooled = np.zeros_like(pooled)
        for head, dy, scale in (("actor", dlogits, 1.0), ("critic", dvalue, trunk_value_scale)):
            if dy is None:
                continue
            dy = np.asarray(dy, dtype=self.dtype)
            if head == "critic":
                dy = dy.reshape(-1, 1)
            z0, a0 = cache[head]
            da0, dW1, db1 = dense_backward(dy, a0, p[f"{head}.fc1.W"])
            g[f"{head}.fc1.W"] += dW1
            g[f"{head}.fc1.b"] += db1
            dz0 = leaky_backward(da0, z0)
            dp, dW0, db0 = dense_backward(dz0, pooled, p[f"{head}.fc0.W"])
            g[f"{head}.fc0.W"] += dW0
            g[f"{head}.fc0.b"] += db0
            dpooled += scale * dp
        dh = dynamic_pool_backward(dpooled, cache["arg"], cache["n"])
        batch = cache["batch"]
        for i in reversed(range(len(self.cfg.conv))):
            dz = leaky_backward(dh, cache["z"][i])
            dh, dW, db = tree_conv_backward(dz, cache["cat"][i], batch.left, batch.right, p[f"trunk.conv{i}.W"])
            g[f"trunk.conv{i}.W"] += dW
            g[f"trunk.conv{i}.b"] += db
        return dh


def check_loss(value: float, name: str, diagnostics: Mapping | None = None) -> float:
    if not np.isfinite(value):
        raise TrainingError(f"{name} is not finite ({value})", dict(diagnostics or {}))
    return float(value)


# ---------------------------------------------------------------------------
# optimizer


@dataclass(frozen=True)
class AdamHyper:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: ParamStore, lr: float, names: Iterable[str] | None = None,
              hyper: AdamHyper = AdamHyper()) -> ParamStore:
    """Bias-corrected Adam update in place for ``names`` (default: all) using their gradients."""
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    for k in (params.values if names is None else names):
        g = params.grads[k]
        params.t[k] += 1
        t = params.t[k]
        m, v = params.m[k], params.v[k]
        m *= hyper.beta1
        m += (1 - hyper.beta1) * g
        v *= hyper.beta2
        v += (1 - hyper.beta2) * g * g
        mhat = m / (1 - hyper.beta1 ** t)
        vhat = v / (1 - hyper.beta2 ** t)
        params.values[k] -= (lr * mhat / (np.sqrt(vhat) + hyper.eps)).astype(params.dtype)
        if not np.all(np.isfinite(params.values[k])):
            raise TrainingError(f"parameter {k} became non-finite after update", {"param": k, "step": t})
    return params


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"AQORACK\x00"
VERSION = 1


def params_to_arrays(params: ParamStore) -> dict[str, np.ndarray]:
    out = {}
    for k in params.values:
        out[f"param/{k}"] = params.values[k]
        out[f"adam.m/{k}"] = params.m[k]
        out[f"adam.v/{k}"] = params.v[k]
        out[f"adam.t/{k}"] = np.array([params.t[k]], dtype=np.float32)
    return out


def params_from_arrays(arrays: Mapping[str, np.ndarray], dtype=np.float32) -> ParamStore:
    ps = ParamStore(dtype)
    for key, val in arrays.items():
        if key.startswith("param/"):
            name = key[len("param/"):]
            ps.add(name, val)
            if f"adam.m/{name}" in arrays:
                ps.m[name] = arrays[f"adam.m/{name}"].astype(dtype, copy=True)
                ps.v[name] = arrays[f"adam.v/{name}"].astype(dtype, copy=True)
                ps.t[name] = int(arrays[f"adam.t/{name}"][0])
    return ps


def encode_checkpoint(arrays: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(data: bytes) -> dict[str, np.ndarray]:
    def fail(msg, offset):
        raise DataError(f"corrupt checkpoint (version {version}, offset {offset}): {msg}")

    version = None
    if len(data) < len(MAGIC) + 12 or data[:len(MAGIC)] != MAGIC:
        raise DataError("corrupt checkpoint (offset 0): bad magic")
    version, count = struct.unpack_from("<II", data, len(MAGIC))
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version} (offset {len(MAGIC)})")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        fail("checksum mismatch", len(body))
    off = len(MAGIC) + 8
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, off)
            off += 4
            name = body[off:off + n].decode()
            off += n
            (rank,) = struct.unpack_from("<I", body, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}I", body, off)
            off += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            if off + 4 * size > len(body):
                fail(f"array {name!r} runs past end of file", off)
            out[name] = np.frombuffer(body, dtype="<f4", count=size, offset=off).reshape(shape).copy()
            off += 4 * size
    except struct.error:
        fail("truncated record", off)
    if off != len(body):
        fail("trailing bytes", off)
    return out


def write_atomic(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, arrays: Mapping[str, np.ndarray]) -> None:
    write_atomic(path, encode_checkpoint(arrays))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise DataError(f"checkpoint {path} not found") from None
    return decode_checkpoint(data)
