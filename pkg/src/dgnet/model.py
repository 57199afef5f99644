"""Graph-wired CNN: static (fixed edge weights) and dynamic (routed) forward passes."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import graph as G
from .buffer import AdjacencyBuffer
from .routing import Router
from .tensor import (
    Tensor,
    add,
    add_channel_bias,
    batch_norm,
    conv2d,
    fully_connected,
    getitem,
    global_avg_pool,
    mul,
    relu,
    reshape,
)

MODES = ("baseline", "static_alpha", "dynamic")


@dataclass
class ArchConfig:
    in_channels: int = 3
    num_classes: int = 10
    stage_channels: tuple[int, ...] = (16, 32, 64)
    # N per stage, counting the input and output nodes
    nodes_per_stage: int = 6
    pattern: str = "res"
    pattern_params: dict = field(default_factory=dict)
    kernel_size: int = 3
    stage_stride: int = 2
    router_init_std: float = 0.01
    router_init_bias: float = 0.0
    alpha_init: float = 0.5
    # without normalization, scale each node's init by 1 / (w0 * sqrt(fan-in))
    fan_in_init: bool = True
    head_init_scale: float = 0.0
    # "none": conv + bias + relu; "batch": conv + batch norm + relu
    norm: str = "none"
    dtype: str = "float32"

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if not self.stage_channels:
            raise ValueError("at least one stage is required")
        if self.nodes_per_stage < 2:
            raise ValueError("nodes_per_stage must be >= 2")
        if self.norm not in ("none", "batch"):
            raise ValueError(f"norm must be 'none' or 'batch', got {self.norm!r}")


class NodeBlock:
    """Conv + bias (or batch norm) + ReLU.

    Input nodes change width/stride; output nodes are identity.
    """

    def __init__(self, role: str, c_in: int, c_out: int, k: int, stride: int,
                 rng: np.random.Generator, dtype, input_gain: float = 1.0, norm: str = "none"):
        self.role = role
        self.stride = stride
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.weight = self.bias = self.gamma = None
        self.training = True
        if role == "output":
            return
        # He init, divided by the expected scale of the aggregated input
        std = np.sqrt(2.0 / (c_in * k * k)) / input_gain
        self.weight = Tensor(rng.normal(0.0, std, size=(c_out, c_in, k, k)), requires_grad=True, dtype=dtype)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True, dtype=dtype)
        if norm == "batch":
            self.gamma = Tensor(np.ones(c_out), requires_grad=True, dtype=dtype)
            self.running_mean = np.zeros(c_out, dtype=dtype)
            self.running_var = np.ones(c_out, dtype=dtype)

    def parameters(self) -> list[Tensor]:
        if self.weight is None:
            return []
        return [self.weight, self.bias] + ([self.gamma] if self.gamma is not None else [])

    def __call__(self, x: Tensor) -> Tensor:
        if self.weight is None:
            return x
        y = conv2d(x, self.weight, stride=self.stride, padding=self.k // 2)
        if self.gamma is not None:
            # the bias doubles as the batch-norm shift
            return relu(batch_norm(y, self.gamma, self.bias, self.running_mean, self.running_var,
                                   self.training))
        return relu(add_channel_bias(y, self.bias))


class Stage:
    def __init__(self, graph: G.StageGraph, blocks: list[NodeBlock]):
        self.graph = graph
        self.blocks = blocks  # blocks[j - 1] is node j
        self.routers: dict[int, Router] = {}
        self.alpha: Tensor | None = None
        self.alpha_index: dict[tuple[int, int], int] = {}
        self._targets = {i: graph.targets(i) for i in graph.nodes}
        self._sources = {j: graph.sources(j) for j in graph.nodes}

    @property
    def n_nodes(self) -> int:
        return self.graph.n_nodes

    def targets(self, i: int) -> list[int]:
        return self._targets[i]

    def sources(self, j: int) -> list[int]:
        return self._sources[j]


class Network:
    """K stages chained input-to-output, followed by pooling and a linear classifier."""

    def __init__(self, arch: ArchConfig, mode: str = "dynamic", seed: int = 0,
                 graphs: Sequence[G.StageGraph] | None = None):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        self.arch = arch
        self.mode = mode
        self.seed = seed
        self.dtype = np.dtype(arch.dtype)
        rng = np.random.default_rng(seed)
        n = arch.nodes_per_stage
        if graphs is None:
            if mode == "baseline":
                graphs = [G.pattern_edges(arch.pattern, n, arch.pattern_params, seed + 1000 * s)
                          for s in range(len(arch.stage_channels))]
            else:
                graphs = [G.pattern_edges("complete", n) for _ in arch.stage_channels]
        if len(graphs) != len(arch.stage_channels):
            raise ValueError("one graph per stage is required")
        self.stages: list[Stage] = []
        c_prev = arch.in_channels
        w0 = self.expected_edge_weight()
        gain = 1.0
        for graph, c in zip(graphs, arch.stage_channels):
            report = G.validate(graph)
            if not report:
                raise ValueError(f"invalid stage graph: {report.message}")
            blocks = []
            for j in graph.nodes:
                role = "input" if j == 1 else "output" if j == graph.n_nodes else "interior"
                if j > 1:
                    # batch norm already rescales each node; shrinking a normalised conv's weights
                    # would only raise its effective step size
                    scaled = arch.fan_in_init and arch.norm == "none"
                    gain = w0 * np.sqrt(len(graph.sources(j))) if scaled else 1.0
                blocks.append(NodeBlock(role, c_prev if j == 1 else c, c, arch.kernel_size,
                                        arch.stage_stride if j == 1 else 1, rng, self.dtype, gain, arch.norm))
            stage = Stage(graph, blocks)
            if mode == "dynamic":
                for i in graph.nodes:
                    if stage.targets(i):
                        stage.routers[i] = Router(c, len(stage.targets(i)), rng, arch.router_init_std,
                                                  arch.router_init_bias, self.dtype)
            elif mode == "static_alpha":
                edges = graph.sorted_edges()
                stage.alpha_index = {e: k for k, e in enumerate(edges)}
                stage.alpha = Tensor(np.full(len(edges), arch.alpha_init), requires_grad=True, dtype=self.dtype)
            self.stages.append(stage)
            c_prev = c
        head_std = np.sqrt(1.0 / c_prev) / gain
        self.fc_weight = Tensor(rng.normal(0.0, head_std, size=(c_prev, arch.num_classes)) * arch.head_init_scale,
                                requires_grad=True, dtype=self.dtype)
        self.fc_bias = Tensor(np.zeros(arch.num_classes), requires_grad=True, dtype=self.dtype)
        # with batch norm, the last stage's output sum is normalised before pooling
        self.head_gamma = self.head_beta = None
        self.training = True
        if arch.norm == "batch":
            self.head_gamma = Tensor(np.ones(c_prev), requires_grad=True, dtype=self.dtype)
            self.head_beta = Tensor(np.zeros(c_prev), requires_grad=True, dtype=self.dtype)
            self.head_running_mean = np.zeros(c_prev, dtype=self.dtype)
            self.head_running_var = np.ones(c_prev, dtype=self.dtype)

    def expected_edge_weight(self) -> float:
        """Mean edge weight at initialisation under this network's mode."""
        if self.mode == "dynamic":
            return float(1.0 / (1.0 + np.exp(-self.arch.router_init_bias)))
        if self.mode == "static_alpha":
            return self.arch.alpha_init
        return 1.0

    # -- parameters -------------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for s, stage in enumerate(self.stages):
            for j, block in enumerate(stage.blocks, start=1):
                if block.weight is not None:
                    out[f"stage{s}.node{j}.weight"] = block.weight
                    out[f"stage{s}.node{j}.bias"] = block.bias
                if block.gamma is not None:
                    out[f"stage{s}.node{j}.gamma"] = block.gamma
            for i, r in stage.routers.items():
                out[f"stage{s}.router{i}.weight"] = r.weight
                out[f"stage{s}.router{i}.bias"] = r.bias
            if stage.alpha is not None:
                out[f"stage{s}.alpha"] = stage.alpha
        if self.head_gamma is not None:
            out["head.norm_gamma"] = self.head_gamma
            out["head.norm_beta"] = self.head_beta
        out["head.weight"] = self.fc_weight
        out["head.bias"] = self.fc_bias
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def network_parameters(self) -> list[Tensor]:
        """W_n: convolution and classifier tensors."""
        return [p for k, p in self.named_parameters().items() if ".router" not in k and not k.endswith("alpha")]

    def router_parameters(self) -> list[Tensor]:
        """W_r: router weights and biases."""
        return [p for k, p in self.named_parameters().items() if ".router" in k]

    def named_buffers(self) -> dict[str, np.ndarray]:
        """Non-learnable state (batch-norm running statistics)."""
        out = {}
        for s, stage in enumerate(self.stages):
            for j, block in enumerate(stage.blocks, start=1):
                if block.gamma is not None:
                    out[f"stage{s}.node{j}.running_mean"] = block.running_mean
                    out[f"stage{s}.node{j}.running_var"] = block.running_var
        if self.head_gamma is not None:
            out["head.running_mean"] = self.head_running_mean
            out["head.running_var"] = self.head_running_var
        return out

    def train(self, flag: bool = True) -> Network:
        self.training = flag
        for stage in self.stages:
            for block in stage.blocks:
                block.training = flag
        return self

    def eval(self) -> Network:
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def _input(self, x) -> Tensor:
        if isinstance(x, Tensor):
            return x if x.dtype == self.dtype else Tensor(x.data, dtype=self.dtype)
        return Tensor(np.asarray(x), dtype=self.dtype)

    def head(self, h: Tensor) -> Tensor:
        if self.head_gamma is not None:
            h = batch_norm(h, self.head_gamma, self.head_beta, self.head_running_mean, self.head_running_var,
                           self.training)
        return fully_connected(global_avg_pool(h), self.fc_weight, self.fc_bias)

    def forward(self, x, mode: str | None = None) -> Tensor:
        """Logits under the network's own connectivity mechanism."""
        mode = mode or self.mode
        if mode == "dynamic":
            return dynamic_forward(self, x)[0]
        if mode == "static_alpha":
            return static_forward(self, x, alpha_weights(self))
        return static_forward(self, x)

    __call__ = forward


def alpha_weights(net: Network) -> list[dict[tuple[int, int], Tensor]]:
    out = []
    for stage in net.stages:
        if stage.alpha is None:
            raise ValueError("network has no static alpha parameters")
        out.append({e: getitem(stage.alpha, k) for e, k in stage.alpha_index.items()})
    return out


def _aggregate(terms: list[Tensor]) -> Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = add(acc, t)
    return acc


def static_forward(net: Network, x, pattern_weights: Sequence[Mapping] | None = None) -> Tensor:
    """Every sample shares the same edge weights (1 for absent ``pattern_weights``)."""
    h = net._input(x)
    for s, stage in enumerate(net.stages):
        weights = pattern_weights[s] if pattern_weights is not None else None
        feats: dict[int, Tensor] = {1: stage.blocks[0](h)}
        for j in range(2, stage.n_nodes + 1):
            terms = []
            for i in stage.sources(j):
                if weights is None:
                    w = 1.0
                else:
                    try:
                        w = weights[(i, j)]
                    except KeyError:
                        raise KeyError(f"stage {s}: missing weight for edge ({i},{j})") from None
                terms.append(feats[i] if isinstance(w, (int, float)) and w == 1.0 else mul(feats[i], w))
            feats[j] = stage.blocks[j - 1](_aggregate(terms))
        h = feats[stage.n_nodes]
    return net.head(h)


def dynamic_forward(net: Network, x, forced: Sequence[Mapping] | None = None,
                    check: bool = True) -> tuple[Tensor, list[AdjacencyBuffer]]:
    """Routed forward pass; returns logits and the per-stage adjacency buffers.

    ``forced[s]`` maps edges of stage s to constant weights that replace the
    router outputs (edges missing from the mapping get weight 0).
    """
    h = net._input(x)
    B = h.shape[0]
    buffers = []
    for s, stage in enumerate(net.stages):
        buf = AdjacencyBuffer(B, stage.n_nodes, stage.graph.edges, dtype=net.dtype, check=check)
        feats: dict[int, Tensor] = {}
        for j in range(1, stage.n_nodes + 1):
            if j == 1:
                agg = h
            else:
                row = buf.read_incoming(j)
                terms = [mul(feats[i], reshape(getitem(row, (slice(None), i - 1)), (B, 1, 1, 1)))
                         for i in stage.sources(j)]
                agg = _aggregate(terms)
            feats[j] = stage.blocks[j - 1](agg)
            targets = stage.targets(j)
            if not targets:
                continue
            if forced is not None:
                vals = np.array([forced[s].get((j, t), 0.0) for t in targets], dtype=net.dtype)
                alpha = Tensor(np.broadcast_to(vals, (B, len(targets))).copy())
            else:
                if j not in stage.routers:
                    raise ValueError(f"stage {s} node {j} has output edges but no router")
                alpha = stage.routers[j](feats[j])
            buf.write_outgoing(j, alpha, targets)
        h = feats[stage.n_nodes]
        buffers.append(buf)
    return net.head(h), buffers


# ---------------------------------------------------------------------------
# inference-time pruning
# ---------------------------------------------------------------------------

@dataclass
class PrunedStage:
    """Active sub-graph of one stage for one sample."""

    n_nodes: int
    weights: np.ndarray  # [N, N], [j-1, i-1] = weight of active edge i -> j, else 0
    open_edges: frozenset
    alive: frozenset
    repaired: tuple = ()

    @property
    def dead(self) -> frozenset:
        return frozenset(range(1, self.n_nodes + 1)) - self.alive

    @property
    def active_edges(self) -> frozenset:
        return frozenset(e for e in self.open_edges if e[0] in self.alive and e[1] in self.alive)


def prune_stage(matrix: np.ndarray, graph: G.StageGraph, policy) -> PrunedStage:
    n = graph.n_nodes
    open_edges = {(i, j) for i, j in graph.edges if matrix[j - 1, i - 1] >= policy.tau_for(i)}
    repaired = []
    fwd = G.reachable_from(n, open_edges, 1)
    if n not in fwd:
        # reopen the strongest input edge back along a chain until the input side is reached
        v = n
        while True:
            cands = graph.sources(v)
            best = max(cands, key=lambda i: (matrix[v - 1, i - 1], -i))
            open_edges.add((best, v))
            repaired.append((best, v))
            if best in fwd:
                break
            v = best
        fwd = G.reachable_from(n, open_edges, 1)
    bwd = G.reachable_from(n, {(j, i) for i, j in open_edges}, n)
    alive = frozenset(fwd & bwd)
    w = np.zeros((n, n))
    for i, j in open_edges:
        if i in alive and j in alive:
            w[j - 1, i - 1] = matrix[j - 1, i - 1]
    return PrunedStage(n, w, frozenset(open_edges), alive, tuple(repaired))


def prune_for_inference(net: Network, snapshots: Sequence[np.ndarray], policy) -> list[list[PrunedStage]]:
    """Per-sample, per-stage active sub-graphs from buffer snapshots [B, N, N] per stage."""
    B = snapshots[0].shape[0]
    return [[prune_stage(snapshots[s][b], stage.graph, policy) for s, stage in enumerate(net.stages)]
            for b in range(B)]


def matrix_forward(net: Network, x, matrices: Sequence[np.ndarray],
                   alive: Sequence[Sequence[int]] | None = None) -> Tensor:
    """Forward with fixed per-sample weight matrices ([B, N, N] per stage).

    With ``alive`` (one node set per stage, shared by the whole batch) nodes
    outside the set are not executed at all.
    """
    h = net._input(x)
    B = h.shape[0]
    for s, stage in enumerate(net.stages):
        M = np.asarray(matrices[s], dtype=net.dtype)
        live = set(alive[s]) if alive is not None else set(stage.graph.nodes)
        feats: dict[int, Tensor] = {1: stage.blocks[0](h)}
        for j in range(2, stage.n_nodes + 1):
            if j not in live:
                continue
            terms = [mul(feats[i], M[:, j - 1, i - 1].reshape(B, 1, 1, 1))
                     for i in stage.sources(j) if i in live]
            feats[j] = stage.blocks[j - 1](_aggregate(terms))
        h = feats[stage.n_nodes]
    return net.head(h)


def pruned_forward(net: Network, x, pruned: Sequence[Sequence[PrunedStage]], skip_dead: bool = True) -> Tensor:
    """Per-sample thresholded inference; ``skip_dead=False`` executes dead nodes on zero weights."""
    x = net._input(x)
    rows = []
    for b, stages in enumerate(pruned):
        mats = [p.weights[None] for p in stages]
        live = [p.alive for p in stages] if skip_dead else None
        rows.append(matrix_forward(net, Tensor(x.data[b:b + 1]), mats, live).data)
    return Tensor(np.concatenate(rows, axis=0))


def thresholded_inference(net: Network, x, policy) -> tuple[Tensor, list[list[PrunedStage]]]:
    """Soft routed pass, then pruning of the recorded connectivity, then skipped execution."""
    _, buffers = dynamic_forward(net, x)
    pruned = prune_for_inference(net, [b.snapshots() for b in buffers], policy)
    return pruned_forward(net, x, pruned), pruned
