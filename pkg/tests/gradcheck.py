"""Central finite differences against the hand-written backward passes (float64)."""
from __future__ import annotations

import numpy as np

from aqora.nncore import (NetConfig, TreeBatch, TreeCNN, dense_backward, dense_forward, dynamic_pool,
                          dynamic_pool_backward, leaky, leaky_backward, tree_conv_backward, tree_conv_forward)
from aqora.encode import VectorTree

EPS = 1e-6
FLOOR = 1e-6
KINK_TOL = 1e-4
SKIPPED = [0, 0]  # [coordinates straddling a kink, coordinates checked]


def rel_err(a, n) -> float:
    """Worst relative error, ignoring coordinates where ``n`` is NaN (kinks)."""
    a, n = np.asarray(a, dtype=np.float64), np.asarray(n, dtype=np.float64)
    ok = ~np.isnan(n)
    a, n = a[ok], n[ok]
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), FLOOR), initial=0.0))


def _central(f, flat, c, eps):
    old = flat[c]
    flat[c] = old + eps
    hi = f()
    flat[c] = old - eps
    lo = f()
    flat[c] = old
    return (hi - lo) / (2 * eps)


def numeric(f, x, coords):
    """d f / d x at the given flat coordinates; ``f`` reads ``x`` in place.

    Leaky ReLU and max pooling are piecewise linear. If the two step sizes
    disagree, the stencil straddles a switch point and the coordinate is
    reported as NaN. This never consults the analytic gradient.
    """
    flat = x.reshape(-1)
    out = []
    for c in coords:
        d1 = _central(f, flat, c, EPS)
        d2 = _central(f, flat, c, EPS / 4)
        SKIPPED[1] += 1
        if abs(d1 - d2) > KINK_TOL * max(abs(d1), abs(d2), FLOOR):
            SKIPPED[0] += 1
            out.append(np.nan)
        else:
            out.append(d1)
    return np.array(out)


def _coords(rng, size, k=12):
    return rng.choice(size, size=min(size, k), replace=False)


def random_tree(rng, n_nodes, width) -> VectorTree:
    """Random binary tree in post-order (children before parents)."""
    lefts, rights = [], []

    def build(n):
        if n == 1:
            lefts.append(-1)
            rights.append(-1)
            return len(lefts) - 1
        k = int(rng.integers(1, n))
        a = build(k)
        b = build(n - k)
        lefts.append(a)
        rights.append(b)
        return len(lefts) - 1

    build(n_nodes)
    x = rng.standard_normal((len(lefts), width))
    return VectorTree(x, np.array(lefts), np.array(rights))


def check_dense(rng):
    n, i, o = (int(v) for v in rng.integers(1, 9, size=3))
    x, W, b = rng.standard_normal((n, i)), rng.standard_normal((i, o)), rng.standard_normal(o)
    R = rng.standard_normal((n, o))
    f = lambda: float((dense_forward(x, W, b) * R).sum())
    grads = dense_backward(R, x, W)
    errs = []
    for arr, grad in zip((x, W, b), grads):
        c = _coords(rng, arr.size)
        errs.append(rel_err(grad.reshape(-1)[c], numeric(f, arr, c)))
    return max(errs)


def check_leaky(rng):
    z = rng.standard_normal((int(rng.integers(1, 9)), int(rng.integers(1, 9))))
    z[np.abs(z) < 1e-3] = 0.5  # keep away from the kink
    R = rng.standard_normal(z.shape)
    f = lambda: float((leaky(z) * R).sum())
    c = _coords(rng, z.size)
    return rel_err(leaky_backward(R, z).reshape(-1)[c], numeric(f, z, c))


def check_tree_conv(rng):
    width, out = int(rng.integers(1, 7)), int(rng.integers(1, 7))
    t = random_tree(rng, int(2 * rng.integers(1, 7) - 1), width)
    h = t.x.copy()
    W, b = rng.standard_normal((3 * width, out)), rng.standard_normal(out)
    R = rng.standard_normal((len(h), out))
    f = lambda: float((tree_conv_forward(h, t.left, t.right, W, b)[0] * R).sum())
    _, cat = tree_conv_forward(h, t.left, t.right, W, b)
    dh, dW, db = tree_conv_backward(R, cat, t.left, t.right, W)
    errs = []
    for arr, grad in ((h, dh), (W, dW), (b, db)):
        c = _coords(rng, arr.size)
        errs.append(rel_err(grad.reshape(-1)[c], numeric(f, arr, c)))
    return max(errs)


def check_pool(rng):
    sizes = rng.integers(1, 6, size=int(rng.integers(1, 4)))
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
    h = rng.standard_normal((int(sizes.sum()), int(rng.integers(1, 7))))
    R = rng.standard_normal((len(sizes), h.shape[1]))
    f = lambda: float((dynamic_pool(h, starts)[0] * R).sum())
    _, arg = dynamic_pool(h, starts)
    dh = dynamic_pool_backward(R, arg, len(h))
    c = _coords(rng, h.size, 20)
    return rel_err(dh.reshape(-1)[c], numeric(f, h, c))


def check_network(rng):
    width = int(rng.integers(2, 7))
    n_actions = int(rng.integers(2, 7))
    conv = tuple(int(v) for v in rng.integers(2, 7, size=int(rng.integers(1, 4))))
    net = TreeCNN(NetConfig(width, n_actions, conv, int(rng.integers(2, 9)), int(rng.integers(1 << 30)),
                            actor_out_scale=1.0), dtype=np.float64)
    trees = [random_tree(rng, int(2 * rng.integers(1, 5) - 1), width) for _ in range(int(rng.integers(1, 4)))]
    batch = TreeBatch.from_trees(trees, np.float64)
    Ra = rng.standard_normal((len(trees), n_actions))
    Rv = rng.standard_normal(len(trees))
    vs = float(rng.uniform(0.1, 1.0))

    def loss():
        logits, values, _ = net.forward(batch)
        return float((logits * Ra).sum() + (values * Rv).sum())

    _, _, cache = net.forward(batch)
    net.params.zero_grad()
    net.backward(cache, Ra, Rv, trunk_value_scale=1.0)
    errs = []
    for name in net.params:
        c = _coords(rng, net.params[name].size, 6)
        errs.append(rel_err(net.params.grads[name].reshape(-1)[c], numeric(loss, net.params[name], c)))
    # the trunk scale only rescales the critic's contribution to the shared trunk
    net.params.zero_grad()
    net.backward(cache, None, Rv, trunk_value_scale=vs)
    scaled = {k: net.params.grads[k].copy() for k in net.params}
    net.params.zero_grad()
    net.backward(cache, None, Rv, trunk_value_scale=1.0)
    for k in net.params:
        factor = vs if k.startswith("trunk.") else 1.0
        errs.append(rel_err(scaled[k], factor * net.params.grads[k]))
    return max(errs)


def run_all(n_shapes: int, seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    worst = {"dense": 0.0, "leaky": 0.0, "tree_conv": 0.0, "pool": 0.0, "network": 0.0}
    for _ in range(n_shapes):
        worst["dense"] = max(worst["dense"], check_dense(rng))
        worst["leaky"] = max(worst["leaky"], check_leaky(rng))
        worst["tree_conv"] = max(worst["tree_conv"], check_tree_conv(rng))
        worst["pool"] = max(worst["pool"], check_pool(rng))
        worst["network"] = max(worst["network"], check_network(rng))
    return worst
