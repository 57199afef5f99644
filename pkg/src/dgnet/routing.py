"""Per-node routers and inference-time edge thresholding."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import Tensor, ShapeError, fully_connected, global_avg_pool, mul, sigmoid, stack

DEFAULT_TAU = 0.05


class Router:
    """Squeeze-and-excite style weight generator for a node's output edges.

    Global average pooling squeezes the node's transformed features to a
    channel vector, an affine map projects it to one logit per output edge,
    and a sigmoid turns the logits into edge weights in (0, 1).
    """

    def __init__(self, channels: int, n_out: int, rng: np.random.Generator | None = None,
                 init_std: float = 0.01, init_bias: float = 0.0, dtype=np.float32):
        if channels < 1 or n_out < 1:
            raise ValueError("router needs positive channel and edge counts")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Tensor(rng.normal(0.0, init_std, size=(channels, n_out)), requires_grad=True,
                             dtype=dtype, name="router.weight")
        self.bias = Tensor(np.full(n_out, init_bias), requires_grad=True, dtype=dtype, name="router.bias")

    @property
    def channels(self) -> int:
        return self.weight.shape[0]

    @property
    def n_out(self) -> int:
        return self.weight.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, features: Tensor) -> Tensor:
        return route(self, features)


def route(router: Router, features: Tensor) -> Tensor:
    """Per-sample edge weights [B, n_out] for features [B, C, H, W]."""
    if features.ndim != 4:
        raise ShapeError(f"router expects [B,C,H,W] features, got {features.shape}")
    if features.shape[1] != router.channels:
        raise ShapeError(f"router channel mismatch: features have C={features.shape[1]}, "
                         f"router expects {router.channels}")
    return sigmoid(fully_connected(global_avg_pool(features), router.weight, router.bias))


def router_multiadds(c_in: int, n_out: int) -> int:
    if c_in < 1 or n_out < 1:
        raise ValueError("router_multiadds needs positive arguments")
    return c_in * n_out


@dataclass
class ThresholdPolicy:
    """``mode='off'`` keeps every edge; ``mode='fixed'`` closes edges below tau.

    ``per_node`` overrides ``tau`` for individual source nodes; the threshold
    of a source node applies to that node's output edges.
    """

    mode: str = "fixed"
    tau: float = DEFAULT_TAU
    per_node: Mapping[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("off", "fixed"):
            raise ValueError(f"threshold mode must be 'off' or 'fixed', got {self.mode!r}")
        self.per_node = {int(k): float(v) for k, v in self.per_node.items()}
        for t in [self.tau, *self.per_node.values()]:
            if not 0.0 <= t < 1.0:
                raise ValueError(f"tau must lie in [0,1), got {t}")

    def tau_for(self, node: int) -> float:
        if self.mode == "off":
            return 0.0
        return self.per_node.get(node, self.tau)


def apply_threshold(weights, policy: ThresholdPolicy, node: int | None = None):
    """Zero every weight below the node's tau; kept weights pass unchanged."""
    tau = policy.tau_for(node) if node is not None else (0.0 if policy.mode == "off" else policy.tau)
    if isinstance(weights, Tensor):
        if policy.mode == "off":
            return weights
        return mul(weights, (weights.data >= tau).astype(weights.dtype))
    arr = np.asarray(weights)
    if policy.mode == "off":
        return arr.copy()
    return np.where(arr < tau, 0.0, arr).astype(arr.dtype, copy=False)


def split_routers(router: Router) -> list[Router]:
    """One single-output router per output edge, sharing the joint parameters column-wise."""
    parts = []
    for j in range(router.n_out):
        r = Router.__new__(Router)
        r.weight = Tensor(router.weight.data[:, j:j + 1].copy())
        r.bias = Tensor(router.bias.data[j:j + 1].copy())
        parts.append(r)
    return parts


def split_equivalence_check(router: Router, features: Tensor, permutation=None) -> float:
    """Max |joint - split| over samples and edges.

    The joint form predicts all output edges of a node at once; the split
    form runs one independent router per edge (as if each successor owned
    a router for its input edge) and concatenates. ``permutation`` reorders
    the split routers, and the joint output is compared after the same
    reordering.
    """
    joint = route(router, features).data
    parts = split_routers(router)
    order = list(range(router.n_out)) if permutation is None else list(permutation)
    split = stack([route(parts[j], features)[:, 0] for j in order], axis=1).data
    return float(np.max(np.abs(joint[:, order] - split)))
