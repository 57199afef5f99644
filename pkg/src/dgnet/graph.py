"""Stage graphs: wiring patterns, validation, DOT/CSV export.

Nodes are numbered 1..N and the numbering is the topological order: node 1
is the stage input, node N the stage output, and every edge (i, j) has i < j.
"""
from __future__ import annotations

import io
import re
from dataclasses import dataclass, field
from typing import Mapping

import networkx as nx

PATTERN_KINDS = ("vgg", "res", "dense", "complete", "er", "ba", "ws")
RANDOM_KINDS = ("er", "ba", "ws")
DEFAULT_PARAMS = {"er": {"p": 0.2}, "ba": {"m": 5}, "ws": {"k": 4, "p": 0.75}}

Edge = tuple[int, int]


@dataclass(frozen=True)
class StageGraph:
    n_nodes: int
    edges: frozenset[Edge]

    def __post_init__(self):
        object.__setattr__(self, "edges", frozenset((int(i), int(j)) for i, j in self.edges))

    @property
    def nodes(self) -> range:
        return range(1, self.n_nodes + 1)

    def sorted_edges(self) -> list[Edge]:
        return sorted(self.edges)

    def targets(self, i: int) -> list[int]:
        return sorted(j for a, j in self.edges if a == i)

    def sources(self, j: int) -> list[int]:
        return sorted(i for i, b in self.edges if b == j)

    def is_complete(self) -> bool:
        return len(self.edges) == self.n_nodes * (self.n_nodes - 1) // 2 and validate(self).ok


@dataclass(frozen=True)
class WiringPattern:
    kind: str
    params: Mapping[str, float] = field(default_factory=dict)
    seed: int = 0

    def build(self, n_nodes: int) -> StageGraph:
        return pattern_edges(self.kind, n_nodes, self.params, self.seed)


def _check_params(kind: str, n: int, params: Mapping) -> dict:
    if kind not in PATTERN_KINDS:
        raise ValueError(f"unknown wiring kind {kind!r}; expected one of {PATTERN_KINDS}")
    if n < 2:
        raise ValueError(f"a stage graph needs at least 2 nodes, got {n}")
    merged = dict(DEFAULT_PARAMS.get(kind, {}))
    merged.update(params or {})
    extra = set(merged) - set(DEFAULT_PARAMS.get(kind, {}))
    if extra:
        raise ValueError(f"unexpected parameters for {kind}: {sorted(extra)}")
    if kind == "er" and not 0.0 <= merged["p"] <= 1.0:
        raise ValueError(f"er p must lie in [0,1], got {merged['p']}")
    if kind == "ba":
        m = merged["m"]
        if int(m) != m or not 1 <= m < n:
            raise ValueError(f"ba m must be an integer in [1, N), got m={m} for N={n}")
        merged["m"] = int(m)
    if kind == "ws":
        k, p = merged["k"], merged["p"]
        if int(k) != k or k % 2 or k < 2 or k >= n:
            raise ValueError(f"ws k must be even with 2 <= k < N, got k={k} for N={n}")
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"ws p must lie in [0,1], got {p}")
        merged["k"] = int(k)
    return merged


def _undirected(kind: str, n: int, params: dict, seed: int) -> nx.Graph:
    if kind == "er":
        return nx.gnp_random_graph(n, params["p"], seed=seed)
    if kind == "ba":
        m = params["m"]
        # start from K_m so small stages still get attachment steps; K_1 has no edges to attach to
        start = nx.complete_graph(m) if m > 1 else None
        return nx.barabasi_albert_graph(n, m, seed=seed, initial_graph=start)
    return nx.watts_strogatz_graph(n, params["k"], params["p"], seed=seed)


def repair_sources_sinks(n: int, edges: set[Edge]) -> set[Edge]:
    """Wire node 1 into every orphan source and every dead-end sink into node N."""
    edges = set(edges)
    has_in = {j for _, j in edges}
    for j in range(2, n + 1):
        if j not in has_in:
            edges.add((1, j))
    has_out = {i for i, _ in edges}
    for i in range(1, n):
        if i not in has_out:
            edges.add((i, n))
    return edges


def pattern_edges(kind: str, n: int, params: Mapping | None = None, seed: int = 0) -> StageGraph:
    """Edge set of an N-node stage for the given wiring kind."""
    params = _check_params(kind, n, params or {})
    if kind == "vgg":
        edges = {(i, i + 1) for i in range(1, n)}
    elif kind == "res":
        edges = {(i, j) for i in range(1, n) for j in (i + 1, i + 2) if j <= n}
    elif kind in ("dense", "complete"):
        edges = {(i, j) for j in range(2, n + 1) for i in range(1, j)}
    else:
        g = _undirected(kind, n, params, seed)
        # orient lower -> higher index; node u of the generator is stage node u + 1
        edges = {(min(u, v) + 1, max(u, v) + 1) for u, v in g.edges()}
        edges = repair_sources_sinks(n, edges)
    return StageGraph(n, frozenset(edges))


@dataclass
class ValidationReport:
    ok: bool
    message: str = ""
    nodes: tuple[int, ...] = ()

    def __bool__(self):
        return self.ok


def _reach(start: int, adj: dict[int, list[int]]) -> set[int]:
    seen = {start}
    stack = [start]
    while stack:
        u = stack.pop()
        for v in adj.get(u, ()):
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return seen


def reachable_from(n_nodes: int, edges, start: int = 1) -> set[int]:
    adj: dict[int, list[int]] = {}
    for i, j in edges:
        adj.setdefault(i, []).append(j)
    return _reach(start, adj)


def validate(graph: StageGraph) -> ValidationReport:
    n = graph.n_nodes
    if n < 2:
        return ValidationReport(False, f"graph has {n} nodes; at least 2 required")
    for i, j in sorted(graph.edges):
        if not (1 <= i <= n and 1 <= j <= n):
            return ValidationReport(False, f"edge ({i},{j}) references a node outside 1..{n}", (i, j))
        if i >= j:
            return ValidationReport(False, f"edge against topological order: ({i},{j})", (i, j))
    fwd: dict[int, list[int]] = {}
    rev: dict[int, list[int]] = {}
    for i, j in graph.edges:
        fwd.setdefault(i, []).append(j)
        rev.setdefault(j, []).append(i)
    from_input = _reach(1, fwd)
    to_output = _reach(n, rev)
    for v in range(2, n + 1):
        if v not in from_input:
            return ValidationReport(False, f"node unreachable from input: {v}", (v,))
    for v in range(1, n):
        if v not in to_output:
            return ValidationReport(False, f"node cannot reach output: {v}", (v,))
    return ValidationReport(True)


# ---------------------------------------------------------------------------
# export / import
# ---------------------------------------------------------------------------

def _check_weights(graph: StageGraph, weights: Mapping[Edge, float] | None):
    if not weights:
        return
    for e in weights:
        if tuple(e) not in graph.edges:
            raise KeyError(f"weight given for non-existent edge {tuple(e)}")


def export_dot(graph: StageGraph, weights: Mapping[Edge, float] | None = None, name: str = "stage") -> str:
    _check_weights(graph, weights)
    out = io.StringIO()
    out.write(f"digraph {name} {{\n")
    out.write("  rankdir=LR;\n")
    for v in graph.nodes:
        role = "input" if v == 1 else "output" if v == graph.n_nodes else "node"
        out.write(f'  {v} [label="{v}", role="{role}"];\n')
    for i, j in graph.sorted_edges():
        if weights and (i, j) in weights:
            w = float(weights[(i, j)])
            # label is for display; w carries the exact value for round trips
            out.write(f'  {i} -> {j} [label="{w:.3f}", w="{w!r}"];\n')
        else:
            out.write(f"  {i} -> {j};\n")
    out.write("}\n")
    return out.getvalue()


_NODE_RE = re.compile(r"^\s*(\d+)\s*\[")
_EDGE_RE = re.compile(r'^\s*(\d+)\s*->\s*(\d+)\s*(?:\[label="([^"]*)"(?:,\s*w="([^"]*)")?\])?\s*;')


def parse_dot(text: str) -> tuple[StageGraph, dict[Edge, float]]:
    """Read back a DOT document written by :func:`export_dot`."""
    nodes: set[int] = set()
    edges: set[Edge] = set()
    weights: dict[Edge, float] = {}
    for line in text.splitlines():
        m = _EDGE_RE.match(line)
        if m:
            e = (int(m.group(1)), int(m.group(2)))
            edges.add(e)
            nodes.update(e)
            exact = m.group(4) if m.group(4) is not None else m.group(3)
            if exact is not None:
                weights[e] = float(exact)
            continue
        m = _NODE_RE.match(line)
        if m:
            nodes.add(int(m.group(1)))
    return StageGraph(max(nodes) if nodes else 0, frozenset(edges)), weights


def export_edge_csv(graph: StageGraph, weights: Mapping[Edge, float] | None = None) -> str:
    _check_weights(graph, weights)
    lines = ["i,j,weight"]
    for i, j in graph.sorted_edges():
        w = weights.get((i, j), 1.0) if weights else 1.0
        lines.append(f"{i},{j},{w!r}")
    return "\n".join(lines) + "\n"


def parse_edge_csv(text: str) -> dict[Edge, float]:
    out = {}
    for line in text.strip().splitlines()[1:]:
        i, j, w = line.split(",")
        out[(int(i), int(j))] = float(w)
    return out
