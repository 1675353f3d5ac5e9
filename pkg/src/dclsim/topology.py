"""Communication graphs with per-edge budget and frequency."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class EdgeMeta:
    budget: float = float("inf")  # floats per communication
    frequency: int = 1  # epochs between communications


@dataclass
class Topology:
    """Directed graph; ``edges[(src, dst)]`` means ``src`` may send to ``dst``."""

    n: int
    edges: dict = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        for (i, j), meta in self.edges.items():
            if i == j:
                raise ValueError(f"self-edge on agent {i}")
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise ValueError(f"edge {(i, j)} outside 0..{self.n - 1}")
            if meta.budget < 0 or meta.frequency < 1:
                raise ValueError(f"edge {(i, j)}: need budget >= 0 and frequency >= 1")

    def neighbors(self, i):
        """Agents that can send to ``i`` (ascending)."""
        return sorted(s for (s, d) in self.edges if d == i)

    def out_neighbors(self, i):
        return sorted(d for (s, d) in self.edges if s == i)

    def degree(self, i):
        return len(self.neighbors(i))

    def n_edges(self):
        return len(self.edges)

    def undirected_edges(self):
        return sorted({tuple(sorted(e)) for e in self.edges})

    def is_connected(self):
        if self.n <= 1:
            return True
        seen, stack = {0}, [0]
        while stack:
            i = stack.pop()
            for j in self.neighbors(i) + self.out_neighbors(i):
                if j not in seen:
                    seen.add(j)
                    stack.append(j)
        return len(seen) == self.n

    def with_edge_meta(self, budget=None, frequency=None):
        meta = {}
        for e, m in self.edges.items():
            meta[e] = EdgeMeta(m.budget if budget is None else budget, m.frequency if frequency is None else frequency)
        return Topology(self.n, meta, self.name)

    def to_edge_list(self, path):
        with open(path, "w") as f:
            for (i, j), m in sorted(self.edges.items()):
                f.write(f"{i} {j} {m.budget:g} {m.frequency}\n")

    @classmethod
    def from_edge_list(cls, path, n=None):
        edges = {}
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                parts = line.split()
                if len(parts) != 4:
                    raise ValueError(f"{path}:{lineno}: expected 'i j b f', got {line!r}")
                i, j = int(parts[0]), int(parts[1])
                edges[(i, j)] = EdgeMeta(float(parts[2]), int(parts[3]))
        if n is None:
            n = 1 + max((max(e) for e in edges), default=-1)
        return cls(n, edges, name=str(path))


def _undirected(n, pairs, name, meta=None):
    meta = meta or EdgeMeta()
    edges = {}
    for i, j in pairs:
        edges[(i, j)] = meta
        edges[(j, i)] = meta
    return Topology(n, edges, name)


def gen_erdos_renyi(n: int, p: float, seed: int = 0, meta: EdgeMeta | None = None) -> Topology:
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    rng = np.random.default_rng([seed, 15485863])
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    draws = rng.random(len(pairs))
    return _undirected(n, [pr for pr, u in zip(pairs, draws) if u < p], f"er-{p:g}", meta)


def gen_complete(n: int, meta: EdgeMeta | None = None) -> Topology:
    return _undirected(n, [(i, j) for i in range(n) for j in range(i + 1, n)], "complete", meta)


def gen_ring(n: int, meta: EdgeMeta | None = None) -> Topology:
    if n < 2:
        raise ValueError("ring needs n >= 2")
    pairs = {tuple(sorted((i, (i + 1) % n))) for i in range(n)}
    return _undirected(n, sorted(pairs), "ring", meta)


def gen_server(n: int, meta: EdgeMeta | None = None) -> Topology:
    if n < 2:
        raise ValueError("server needs n >= 2")
    return _undirected(n, [(0, i) for i in range(1, n)], "server", meta)


def gen_tree(n: int, meta: EdgeMeta | None = None) -> Topology:
    """Balanced binary tree rooted at agent 0 (parent of i is (i - 1) // 2)."""
    if n < 2:
        raise ValueError("tree needs n >= 2")
    return _undirected(n, [((i - 1) // 2, i) for i in range(1, n)], "tree", meta)


def gen_empty(n: int) -> Topology:
    return Topology(n, {}, "disconnected")


def make_topology(spec: dict | str, n: int, seed: int = 0) -> Topology:
    """Build from a config spec such as ``{"kind": "erdos_renyi", "p": 0.5}`` or ``"ring"``."""
    if isinstance(spec, str):
        spec = {"kind": spec}
    kind = spec.get("kind", "complete")
    meta = EdgeMeta(float(spec.get("budget", float("inf"))), int(spec.get("frequency", 1)))
    if kind in ("erdos_renyi", "er"):
        return gen_erdos_renyi(n, float(spec["p"]), seed, meta)
    if kind == "complete":
        return gen_complete(n, meta)
    if kind == "ring":
        return gen_ring(n, meta)
    if kind == "server":
        return gen_server(n, meta)
    if kind == "tree":
        return gen_tree(n, meta)
    if kind in ("none", "disconnected", "empty"):
        return gen_empty(n)
    if kind == "file":
        return Topology.from_edge_list(spec["path"], n)
    raise ValueError(f"unknown topology kind {kind!r}")
