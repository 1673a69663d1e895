"""Causal subsystem graph: directed, possibly cyclic, immutable once built."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping


class GraphError(ValueError):
    """Raised for malformed graphs or queries on unknown nodes."""


class UnknownNodeError(GraphError, KeyError):
    def __init__(self, node: str) -> None:
        super().__init__(f"unknown subsystem: {node!r}")
        self.node = node

    def __str__(self) -> str:
        return self.args[0]


@dataclass(frozen=True)
class CausalGraph:
    """Directed graph over subsystem names.

    An edge ``(l, m)`` states that a fault in ``l`` can propagate to ``m``.
    Cycles are allowed, self-loops and duplicate edges are not.
    """

    nodes: tuple[str, ...]
    edges: frozenset[tuple[str, str]]
    _succ: Mapping[str, tuple[str, ...]] = field(init=False, repr=False, compare=False)
    _pred: Mapping[str, tuple[str, ...]] = field(init=False, repr=False, compare=False)

    def __init__(self, nodes: Iterable[str], edges: Iterable[tuple[str, str]] = ()) -> None:
        node_list = list(nodes)
        seen: set[str] = set()
        for n in node_list:
            if not isinstance(n, str) or not n:
                raise GraphError(f"subsystem ids must be non-empty strings, got {n!r}")
            if n in seen:
                raise GraphError(f"duplicate subsystem: {n!r}")
            seen.add(n)

        edge_set: set[tuple[str, str]] = set()
        for e in edges:
            if len(e) != 2:
                raise GraphError(f"edge must have exactly two endpoints: {e!r}")
            a, b = e
            for end in (a, b):
                if end not in seen:
                    raise GraphError(f"edge {a!r}->{b!r} references unknown subsystem {end!r}")
            if a == b:
                raise GraphError(f"self-loop on {a!r} is not allowed")
            if (a, b) in edge_set:
                raise GraphError(f"duplicate edge {a!r}->{b!r}")
            edge_set.add((a, b))

        succ: dict[str, list[str]] = {n: [] for n in node_list}
        pred: dict[str, list[str]] = {n: [] for n in node_list}
        # sorted adjacency keeps every traversal order deterministic
        for a, b in sorted(edge_set):
            succ[a].append(b)
            pred[b].append(a)

        object.__setattr__(self, "nodes", tuple(node_list))
        object.__setattr__(self, "edges", frozenset(edge_set))
        object.__setattr__(self, "_succ", {n: tuple(v) for n, v in succ.items()})
        object.__setattr__(self, "_pred", {n: tuple(v) for n, v in pred.items()})

    def __contains__(self, node: object) -> bool:
        return node in self._succ

    def __len__(self) -> int:
        return len(self.nodes)

    def check(self, node: str) -> None:
        if node not in self._succ:
            raise UnknownNodeError(node)

    def successors(self, node: str) -> tuple[str, ...]:
        self.check(node)
        return self._succ[node]

    def predecessors(self, node: str) -> tuple[str, ...]:
        self.check(node)
        return self._pred[node]

    def with_edge(self, a: str, b: str) -> CausalGraph:
        return CausalGraph(self.nodes, set(self.edges) | {(a, b)})

    def bfs_distances(self, source: str) -> dict[str, int]:
        """Hop distances from ``source`` to every node it reaches (itself at 0)."""
        self.check(source)
        dist = {source: 0}
        queue = deque([source])
        while queue:
            v = queue.popleft()
            for w in self._succ[v]:
                if w not in dist:
                    dist[w] = dist[v] + 1
                    queue.append(w)
        return dist

    def ancestors_of(self, targets: Iterable[str]) -> set[str]:
        """Every node with a directed path into ``targets``, targets included."""
        start = list(targets)
        for t in start:
            self.check(t)
        seen = set(start)
        queue = deque(start)
        while queue:
            v = queue.popleft()
            for p in self._pred[v]:
                if p not in seen:
                    seen.add(p)
                    queue.append(p)
        return seen

    def is_weakly_connected(self) -> bool:
        if not self.nodes:
            return True
        seen = {self.nodes[0]}
        queue = deque([self.nodes[0]])
        while queue:
            v = queue.popleft()
            for w in self._succ[v] + self._pred[v]:
                if w not in seen:
                    seen.add(w)
                    queue.append(w)
        return len(seen) == len(self.nodes)

    def is_acyclic(self) -> bool:
        indeg = {n: len(self._pred[n]) for n in self.nodes}
        queue = deque(n for n in self.nodes if indeg[n] == 0)
        removed = 0
        while queue:
            v = queue.popleft()
            removed += 1
            for w in self._succ[v]:
                indeg[w] -= 1
                if indeg[w] == 0:
                    queue.append(w)
        return removed == len(self.nodes)

    # serialization

    def to_dict(self) -> dict:
        return {"nodes": list(self.nodes), "edges": [list(e) for e in sorted(self.edges)]}

    @classmethod
    def from_dict(cls, data: object) -> CausalGraph:
        if not isinstance(data, dict):
            raise GraphError("graph document must be a JSON object")
        extra = set(data) - {"nodes", "edges"}
        if extra:
            raise GraphError(f"unknown keys in graph document: {sorted(extra)}")
        if "nodes" not in data:
            raise GraphError("graph document is missing 'nodes'")
        nodes = data["nodes"]
        edges = data.get("edges", [])
        if not isinstance(nodes, list) or not isinstance(edges, list):
            raise GraphError("'nodes' and 'edges' must be arrays")
        pairs = []
        for i, e in enumerate(edges):
            if not isinstance(e, list) or len(e) != 2:
                raise GraphError(f"edges[{i}] must be a two-element array, got {e!r}")
            pairs.append((e[0], e[1]))
        return cls(nodes, pairs)

    @classmethod
    def load(cls, path: str | Path) -> CausalGraph:
        text = Path(path).read_text()
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise GraphError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
        return cls.from_dict(data)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def to_dot(self, symptomatic: Iterable[str] = (), root_causes: Iterable[str] = ()) -> str:
        """Graphviz text; symptoms filled yellow, root causes drawn bold."""
        sym = set(symptomatic)
        roots = set(root_causes)
        lines = ["digraph causal {", "  node [shape=circle, style=filled, fillcolor=lightblue];"]
        for n in self.nodes:
            attrs = []
            if n in sym:
                attrs.append("fillcolor=yellow")
            if n in roots:
                attrs.append("penwidth=3")
            suffix = f" [{', '.join(attrs)}]" if attrs else ""
            lines.append(f"  {json.dumps(n)}{suffix};")
        for a, b in sorted(self.edges):
            lines.append(f"  {json.dumps(a)} -> {json.dumps(b)};")
        lines.append("}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class HealthStateVector:
    """Binary health state per subsystem at one time index (1 = not OK)."""

    states: Mapping[str, int]
    timestamp: int | float | str = 0

    def __post_init__(self) -> None:
        clean = {}
        for k, v in self.states.items():
            if v not in (0, 1):
                raise GraphError(f"health state of {k!r} must be 0 or 1, got {v!r}")
            clean[k] = int(v)
        object.__setattr__(self, "states", clean)

    @property
    def symptomatic(self) -> set[str]:
        return {k for k, v in self.states.items() if v == 1}

    def check_against(self, g: CausalGraph) -> None:
        missing = set(g.nodes) - set(self.states)
        extra = set(self.states) - set(g.nodes)
        if missing or extra:
            raise GraphError(
                f"health states do not match graph nodes (missing {sorted(missing)}, unknown {sorted(extra)})"
            )

    @classmethod
    def from_symptoms(cls, g: CausalGraph, symptomatic: Iterable[str], timestamp=0) -> HealthStateVector:
        sym = set(symptomatic)
        for s in sym:
            g.check(s)
        return cls({n: int(n in sym) for n in g.nodes}, timestamp)


def reachable_set(g: CausalGraph, source: str) -> set[str]:
    """Nodes reachable from ``source`` by directed paths, ``source`` included."""
    return set(g.bfs_distances(source))


def shortest_distance(g: CausalGraph, source: str, target: str) -> int | None:
    g.check(target)
    return g.bfs_distances(source).get(target)


def longest_symptomatic_chain(g: CausalGraph, start: str, symptomatic: Iterable[str]) -> int:
    """Most symptomatic nodes on a simple path leaving ``start``.

    ``start`` counts only if it is symptomatic itself; the path may continue
    only through symptomatic nodes, so a healthy successor ends it.
    """
    g.check(start)
    sym = set(symptomatic)
    for s in sym:
        g.check(s)
    if not sym:
        return 0
    best = 0
    for s in g.successors(start):
        if s in sym:
            best = max(best, _longest_from(g, s, sym, {start}))
    return best + 1 if start in sym else best


def _longest_from(g: CausalGraph, node: str, sym: set[str], blocked: set[str]) -> int:
    # node count of the longest simple path inside ``sym`` starting at ``node``
    on_path = set(blocked)
    on_path.add(node)
    best = 1
    # explicit stack of (node, successor iterator, depth) to avoid recursion limits
    stack = [(node, iter(g.successors(node)), 1)]
    while stack:
        v, it, depth = stack[-1]
        advanced = False
        for w in it:
            if w in sym and w not in on_path:
                on_path.add(w)
                best = max(best, depth + 1)
                stack.append((w, iter(g.successors(w)), depth + 1))
                advanced = True
                break
        if not advanced:
            stack.pop()
            if v != node:
                on_path.discard(v)
    return best
