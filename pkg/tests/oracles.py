"""Independent reference implementations used by the tests.

None of these share code with the package beyond reading parameter arrays.
"""
from __future__ import annotations

import itertools
import random

import numpy as np


def naive_conv2d(x, w, stride=1, padding=0):
    """Six nested loops, float64."""
    B, C, H, W = x.shape
    Co, Ci, k, _ = w.shape
    xp = np.zeros((B, C, H + 2 * padding, W + 2 * padding))
    xp[:, :, padding:padding + H, padding:padding + W] = x
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    out = np.zeros((B, Co, Ho, Wo))
    for b in range(B):
        for o in range(Co):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0
                    for c in range(C):
                        for di in range(k):
                            for dj in range(k):
                                acc += xp[b, c, i * stride + di, j * stride + dj] * w[o, c, di, dj]
                    out[b, o, i, j] = acc
    return out


def shift_conv2d(x, w, stride=1, padding=0):
    """Shift-and-accumulate convolution: one channel contraction per kernel tap."""
    B, C, H, W = x.shape
    Co, Ci, k, _ = w.shape
    xp = np.pad(np.asarray(x, dtype=np.float64), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    out = np.zeros((B, Co, Ho, Wo))
    for di in range(k):
        for dj in range(k):
            patch = xp[:, :, di:di + stride * (Ho - 1) + 1:stride, dj:dj + stride * (Wo - 1) + 1:stride]
            out += np.einsum("bchw,oc->bohw", patch, np.asarray(w[:, :, di, dj], dtype=np.float64))
    return out


def naive_matmul(a, b):
    n, m = a.shape
    m2, p = b.shape
    assert m == m2
    out = np.zeros((n, p))
    for i in range(n):
        for j in range(p):
            out[i, j] = sum(float(a[i, t]) * float(b[t, j]) for t in range(m))
    return out


def central_difference(f, params, eps=1e-5):
    """Numerical gradient of scalar f() w.r.t. every entry of every float64 array in ``params``."""
    grads = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = p[idx]
            p[idx] = orig + eps
            up = f()
            p[idx] = orig - eps
            down = f()
            p[idx] = orig
            g[idx] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


def network_arrays(net):
    """Plain float64 copies of every parameter, keyed like ``net.named_parameters()``."""
    return {k: np.array(p.data, dtype=np.float64) for k, p in net.named_parameters().items()}


def recursive_dynamic_logits(net, x, forced=None):
    """Per-sample evaluation of the routed network straight from its definition.

    For one sample, node j's output is f_j applied to the sum over its
    predecessors i of w(i, j) * x_i, where w(i, j) is the i-th router's
    output for edge (i, j), computed from x_i itself. Each node output is
    obtained by recursion on its predecessors (memoised).
    """
    P = network_arrays(net)
    rows = []
    for b in range(x.shape[0]):
        h = np.asarray(x[b:b + 1], dtype=np.float64)
        for s, stage in enumerate(net.stages):
            n = stage.n_nodes
            memo = {}

            def node_out(j, h=h, s=s, stage=stage, n=n, memo=memo):
                if j in memo:
                    return memo[j]
                if j == 1:
                    agg = h
                else:
                    agg = 0.0
                    for i in sorted(stage.graph.sources(j)):
                        agg = agg + edge_weight(i, j) * node_out(i)
                blk = stage.blocks[j - 1]
                if j == n:
                    out = agg
                else:
                    y = shift_conv2d(agg, P[f"stage{s}.node{j}.weight"], blk.stride, blk.k // 2)
                    out = np.maximum(y + P[f"stage{s}.node{j}.bias"].reshape(1, -1, 1, 1), 0.0)
                memo[j] = out
                return out

            def edge_weight(i, j, s=s, stage=stage):
                if forced is not None:
                    return forced[s].get((i, j), 0.0)
                targets = sorted(stage.graph.targets(i))
                pooled = node_out(i).mean(axis=(2, 3))[0]
                logits = pooled @ P[f"stage{s}.router{i}.weight"] + P[f"stage{s}.router{i}.bias"]
                return sigmoid(logits)[targets.index(j)]

            h = node_out(n)
        rows.append(h.mean(axis=(2, 3))[0] @ P["head.weight"] + P["head.bias"])
    return np.stack(rows)


def recursive_static_logits(net, x, weights):
    """Fixed per-edge weights shared by all samples (``weights[s][(i, j)]``)."""
    return recursive_dynamic_logits(net, x, forced=weights)


def er_edges(n, p, seed):
    """Erdos-Renyi G(n, p) over 0-based nodes with the standard library RNG."""
    rng = random.Random(seed)
    return {(u, v) for u, v in itertools.combinations(range(n), 2) if rng.random() < p}


def bfs_reachable(n, edges, start):
    adj = {v: [] for v in range(1, n + 1)}
    for i, j in edges:
        adj[i].append(j)
    seen, frontier = {start}, [start]
    while frontier:
        nxt = []
        for u in frontier:
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    nxt.append(v)
        frontier = nxt
    return seen
