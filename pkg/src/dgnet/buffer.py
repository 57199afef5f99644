"""Batched adjacency-matrix buffer shared by the nodes of one stage.

Element ``[b, j-1, i-1]`` holds the weight of edge i -> j for sample b
(node ids are 1-based). A producing node writes its output weights into
its column; a consuming node reads its input weights from its row. The
stored values stay on the tape, so gradients flow back to the routers.
"""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .tensor import Tensor, getitem, index_put


class BufferProtocolError(RuntimeError):
    """Raised on out-of-order or duplicate buffer access."""


class AdjacencyBuffer:
    def __init__(self, batch: int, n_nodes: int, edges: Iterable[tuple[int, int]] | None = None,
                 dtype=np.float32, check: bool = True):
        if batch < 1 or n_nodes < 1:
            raise ValueError(f"buffer needs B, N >= 1, got B={batch}, N={n_nodes}")
        self.batch = batch
        self.n_nodes = n_nodes
        self.data = Tensor(np.zeros((batch, n_nodes, n_nodes), dtype=dtype))
        self.edges = frozenset(edges) if edges is not None else None
        self.check = check
        self.filled = np.zeros((n_nodes, n_nodes), dtype=bool)  # [target-1, source-1]
        self.written: set[int] = set()

    def write_outgoing(self, node: int, weights: Tensor, targets: Sequence[int]):
        targets = [int(t) for t in targets]
        if not targets:
            self.written.add(node)
            return
        if weights.ndim != 2 or weights.shape != (self.batch, len(targets)):
            raise ValueError(f"node {node}: weights of shape {weights.shape} do not match "
                             f"[{self.batch}, {len(targets)}] for targets {targets}")
        if self.check:
            for t in targets:
                if t <= node or t > self.n_nodes:
                    raise BufferProtocolError(f"order violation: node {node} cannot write to node {t}")
                if self.filled[t - 1, node - 1]:
                    raise BufferProtocolError(f"double write to edge ({node},{t})")
            if len(set(targets)) != len(targets):
                raise BufferProtocolError(f"node {node}: duplicate targets {targets}")
        rows = np.asarray(targets) - 1
        self.data = index_put(self.data, (slice(None), rows, node - 1), weights)
        self.filled[rows, node - 1] = True
        self.written.add(node)

    def read_incoming(self, node: int) -> Tensor:
        """Row of input-edge weights for ``node``: Tensor[B, node-1] over sources 1..node-1."""
        if not 1 <= node <= self.n_nodes:
            raise IndexError(f"node {node} outside 1..{self.n_nodes}")
        if self.check:
            for i in range(1, node):
                if self.edges is not None:
                    if (i, node) in self.edges and not self.filled[node - 1, i - 1]:
                        raise BufferProtocolError(f"read of node {node} before edge ({i},{node}) was written")
                elif i not in self.written:
                    raise BufferProtocolError(f"read of node {node} before node {i} wrote its outputs")
        return getitem(self.data, (slice(None), node - 1, slice(0, node - 1)))

    def snapshot(self, sample: int) -> np.ndarray:
        """Detached float64 copy of one sample's N x N matrix."""
        return self.data.data[sample].astype(np.float64)

    def snapshots(self) -> np.ndarray:
        return self.data.data.astype(np.float64)


def new_buffer(batch: int, n_nodes: int, **kwargs) -> AdjacencyBuffer:
    return AdjacencyBuffer(batch, n_nodes, **kwargs)
