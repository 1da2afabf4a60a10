"""Labeled graphs, the text graph format, query sampling and a reference matcher."""

from __future__ import annotations

import itertools
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

ORACLE_CAP = 8

Match = tuple  # tuple of (query vertex, data vertex) pairs


class GraphFormatError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class SamplingError(RuntimeError):
    pass


class OracleCapError(ValueError):
    pass


class LabeledGraph:
    """Undirected vertex-labeled simple graph with dense 0-based vertex ids.

    Instances are treated as immutable once built.
    """

    __slots__ = ("labels", "adjacency", "edge_count", "_adjsets")

    def __init__(self, labels: Sequence[int], edges: Iterable[tuple[int, int]] = ()):
        self.labels = tuple(int(x) for x in labels)
        n = len(self.labels)
        neigh: list[set[int]] = [set() for _ in range(n)]
        count = 0
        for u, v in edges:
            u, v = int(u), int(v)
            if not (0 <= u < n and 0 <= v < n):
                raise ValueError(f"edge ({u}, {v}) references a vertex outside 0..{n - 1}")
            if u == v:
                raise ValueError(f"self-loop on vertex {u}")
            if v in neigh[u]:
                raise ValueError(f"duplicate edge ({u}, {v})")
            neigh[u].add(v)
            neigh[v].add(u)
            count += 1
        self.adjacency = tuple(tuple(sorted(s)) for s in neigh)
        self._adjsets = tuple(frozenset(s) for s in neigh)
        self.edge_count = count

    @property
    def vertex_count(self) -> int:
        return len(self.labels)

    def __len__(self) -> int:
        return len(self.labels)

    def degree(self, v: int) -> int:
        return len(self.adjacency[v])

    def neighbors(self, v: int) -> tuple[int, ...]:
        return self.adjacency[v]

    def has_edge(self, u: int, v: int) -> bool:
        return v in self._adjsets[u]

    def neighbor_set(self, v: int) -> frozenset:
        return self._adjsets[v]

    def edges(self) -> list[tuple[int, int]]:
        return [(u, v) for u in range(len(self.labels)) for v in self.adjacency[u] if u < v]

    def label_set(self) -> set[int]:
        return set(self.labels)

    def is_connected(self) -> bool:
        if not self.labels:
            return True
        return len(component_of(self, 0)) == len(self.labels)

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabeledGraph):
            return NotImplemented
        return self.labels == other.labels and self.adjacency == other.adjacency

    def __hash__(self) -> int:
        return hash((self.labels, self.adjacency))

    def __repr__(self) -> str:
        return f"LabeledGraph(n={self.vertex_count}, m={self.edge_count})"


def component_of(g: LabeledGraph, start: int, limit: int | None = None) -> list[int]:
    """BFS component of ``start``; stops early once ``limit`` vertices are seen."""
    seen = {start}
    order = [start]
    queue = deque([start])
    while queue:
        u = queue.popleft()
        for w in g.adjacency[u]:
            if w not in seen:
                seen.add(w)
                order.append(w)
                if limit is not None and len(order) >= limit:
                    return order
                queue.append(w)
    return order


def induced_subgraph(g: LabeledGraph, vertices: Sequence[int]) -> LabeledGraph:
    """Induced subgraph; vertex ``i`` of the result is ``vertices[i]`` of ``g``."""
    index = {v: i for i, v in enumerate(vertices)}
    edges = []
    for i, v in enumerate(vertices):
        for w in g.adjacency[v]:
            j = index.get(w)
            if j is not None and i < j:
                edges.append((i, j))
    return LabeledGraph([g.labels[v] for v in vertices], edges)


# -- text format ------------------------------------------------------------


def format_graph(g: LabeledGraph) -> str:
    lines = [f"t {g.vertex_count} {g.edge_count}"]
    lines += [f"v {v} {g.labels[v]} {g.degree(v)}" for v in range(g.vertex_count)]
    lines += [f"e {u} {v}" for u, v in g.edges()]
    return "\n".join(lines) + "\n"


def save_graph(g: LabeledGraph, path) -> None:
    Path(path).write_bytes(format_graph(g).encode("ascii"))


def parse_graph(text: str) -> LabeledGraph:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise GraphFormatError(1, "empty file")

    def ints(lineno, parts, expected, tag):
        if len(parts) != expected or parts[0] != tag:
            raise GraphFormatError(lineno, f"expected '{tag}' line with {expected - 1} fields")
        try:
            values = [int(p) for p in parts[1:]]
        except ValueError:
            raise GraphFormatError(lineno, "non-integer field") from None
        if any(x < 0 for x in values):
            raise GraphFormatError(lineno, "negative field")
        return values

    n, m = ints(1, lines[0].split(" "), 3, "t")
    if len(lines) < 1 + n + m:
        raise GraphFormatError(len(lines) + 1, f"unexpected end of file (header declares {n} vertices, {m} edges)")
    if len(lines) > 1 + n + m:
        raise GraphFormatError(2 + n + m, "content beyond the declared vertex and edge counts")
    labels = []
    declared = []
    for k in range(n):
        lineno = k + 2
        vid, label, deg = ints(lineno, lines[k + 1].split(" "), 4, "v")
        if vid != k:
            raise GraphFormatError(lineno, f"vertex id {vid} out of order (expected {k})")
        labels.append(label)
        declared.append(deg)
    edges = []
    seen = set()
    degree = [0] * n
    for k in range(m):
        lineno = n + k + 2
        u, v = ints(lineno, lines[n + k + 1].split(" "), 3, "e")
        if u >= n or v >= n:
            raise GraphFormatError(lineno, "vertex id out of range")
        if u == v:
            raise GraphFormatError(lineno, "self-loop")
        key = (min(u, v), max(u, v))
        if key in seen:
            raise GraphFormatError(lineno, f"duplicate edge {key}")
        seen.add(key)
        degree[u] += 1
        degree[v] += 1
        edges.append(key)
    for v in range(n):
        if degree[v] != declared[v]:
            raise GraphFormatError(v + 2, f"vertex {v} declares degree {declared[v]} but has {degree[v]} edges")
    return LabeledGraph(labels, edges)


def load_graph(path) -> LabeledGraph:
    return parse_graph(Path(path).read_bytes().decode("ascii"))


# -- matches ----------------------------------------------------------------


def canonical(m) -> Match:
    """Match as pairs sorted by query vertex."""
    return tuple(sorted((int(u), int(v)) for u, v in m))


def verify_match(q: LabeledGraph, g: LabeledGraph, m) -> bool:
    f = dict(m)
    if len(f) != q.vertex_count or len(m) != q.vertex_count:
        return False
    if len(set(f.values())) != len(f):
        return False
    for u, v in f.items():
        if not (0 <= v < g.vertex_count) or q.labels[u] != g.labels[v]:
            return False
    return all(g.has_edge(f[a], f[b]) for a, b in q.edges())


def brute_force_enumerate(q: LabeledGraph, g: LabeledGraph, cap: int = ORACLE_CAP) -> set:
    """Every match of ``q`` in ``g`` by plain backtracking in query-id order.

    Assignments are tried for every label-compatible data vertex; the only
    cut is rejecting an assignment that breaks injectivity or an edge to an
    already-assigned query vertex.
    """
    nq = q.vertex_count
    if nq > cap:
        raise OracleCapError(f"query has {nq} vertices; the oracle is capped at {cap}")
    by_label: dict[int, list[int]] = {}
    for v, lab in enumerate(g.labels):
        by_label.setdefault(lab, []).append(v)
    pools = [by_label.get(q.labels[u], []) for u in range(nq)]
    earlier = [[w for w in q.adjacency[u] if w < u] for u in range(nq)]
    found = set()
    assign = [-1] * nq

    def rec(u):
        if u == nq:
            found.add(tuple(enumerate(assign)))
            return
        for v in pools[u]:
            if v in assign[:u]:
                continue
            if all(g.has_edge(assign[w], v) for w in earlier[u]):
                assign[u] = v
                rec(u + 1)
        assign[u] = -1

    if nq:
        rec(0)
    return found


def permutation_enumerate(q: LabeledGraph, g: LabeledGraph) -> set:
    """Second oracle: test every injective tuple of data vertices as a whole."""
    found = set()
    for image in itertools.permutations(range(g.vertex_count), q.vertex_count):
        m = tuple(enumerate(image))
        if verify_match(q, g, m):
            found.add(m)
    return found


# -- sampling ---------------------------------------------------------------


def random_walk_sample(g: LabeledGraph, start: int, target_distinct: int, rng: np.random.Generator):
    """Random walk from ``start`` until ``target_distinct`` distinct vertices are seen.

    Returns ``(query, origin)``: the induced subgraph over the visited vertices,
    renumbered in first-visit order, and ``origin[i]`` = data vertex of query
    vertex ``i``.
    """
    if target_distinct < 1:
        raise SamplingError("target_distinct must be >= 1")
    if len(component_of(g, start, limit=target_distinct)) < target_distinct:
        raise SamplingError(f"component of vertex {start} has fewer than {target_distinct} vertices")
    visited = [start]
    seen = {start}
    cur = start
    while len(visited) < target_distinct:
        nbrs = g.adjacency[cur]
        cur = nbrs[int(rng.integers(len(nbrs)))]
        if cur not in seen:
            seen.add(cur)
            visited.append(cur)
    return induced_subgraph(g, visited), visited


@dataclass
class QuerySet:
    queries: list
    seed: int
    source: str
    size: int = 0
    origins: list = field(default_factory=list)

    def __len__(self):
        return len(self.queries)

    def __iter__(self):
        return iter(self.queries)


def average_degree(g: LabeledGraph) -> float:
    return 2.0 * g.edge_count / g.vertex_count if g.vertex_count else 0.0


def generate_query_set(
    g: LabeledGraph,
    count: int,
    size: int,
    seed: int,
    source: str = "",
    min_avg_degree: float | None = None,
    max_avg_degree: float | None = None,
    retry_budget: int | None = None,
) -> QuerySet:
    """Sample ``count`` connected induced queries of ``size`` vertices.

    ``min_avg_degree``/``max_avg_degree`` restrict the density of accepted
    samples (dense queries have average degree >= 3).
    """
    if count < 1 or size < 1:
        raise ValueError("count and size must be >= 1")
    if g.vertex_count == 0:
        raise SamplingError("data graph is empty")
    rng = np.random.default_rng(seed)
    budget = retry_budget if retry_budget is not None else 200 * count
    queries, origins = [], []
    failures = 0
    while len(queries) < count:
        start = int(rng.integers(g.vertex_count))
        try:
            q, origin = random_walk_sample(g, start, size, rng)
        except SamplingError:
            q = None
        if q is not None:
            deg = average_degree(q)
            if (min_avg_degree is None or deg >= min_avg_degree) and (
                max_avg_degree is None or deg < max_avg_degree
            ):
                queries.append(q)
                origins.append(origin)
                continue
        failures += 1
        if failures > budget:
            raise SamplingError(f"gave up after {failures} rejected samples ({len(queries)}/{count} queries)")
    return QuerySet(queries, seed, source, size, origins)


def save_query_set(qs: QuerySet, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for k, q in enumerate(qs.queries):
        save_graph(q, d / f"query_{k}.graph")
    manifest = [f"seed={qs.seed}", f"source={qs.source}", f"count={len(qs.queries)}", f"size={qs.size}"]
    (d / "manifest.txt").write_bytes(("\n".join(manifest) + "\n").encode("ascii"))


def load_query_set(directory) -> QuerySet:
    d = Path(directory)
    meta = {}
    manifest = d / "manifest.txt"
    if manifest.exists():
        for line in manifest.read_text().splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                meta[k] = v
    files = sorted(d.glob("query_*.graph"), key=lambda p: int(p.stem.split("_")[1]))
    queries = [load_graph(p) for p in files]
    return QuerySet(queries, int(meta.get("seed", 0)), meta.get("source", ""), int(meta.get("size", 0)))


# -- synthetic data graphs --------------------------------------------------


def random_labeled_graph(n: int, p: float, n_labels: int, rng: np.random.Generator, connected: bool = False):
    """Erdos-Renyi graph; with ``connected`` a random spanning tree is added first."""
    labels = rng.integers(n_labels, size=n)
    edges = set()
    if connected and n > 1:
        order = rng.permutation(n)
        for i in range(1, n):
            a, b = int(order[i]), int(order[rng.integers(i)])
            edges.add((min(a, b), max(a, b)))
    mask = np.triu(rng.random((n, n)) < p, k=1)
    for a, b in zip(*np.nonzero(mask)):
        edges.add((int(a), int(b)))
    return LabeledGraph(labels.tolist(), sorted(edges))


def random_connected_query(size: int, extra_edge_p: float, n_labels: int, rng: np.random.Generator):
    return random_labeled_graph(size, extra_edge_p, n_labels, rng, connected=True)


def geometric_graph(n: int, n_labels: int, avg_degree: float, seed: int) -> LabeledGraph:
    """Random geometric graph in the unit square with exactly round(n*avg_degree/2) edges.

    Spatial locality gives many triangles, so dense induced queries exist.
    """
    rng = np.random.default_rng(seed)
    pts = rng.random((n, 2))
    labels = rng.integers(n_labels, size=n)
    m = int(round(n * avg_degree / 2))
    iu, ju = np.triu_indices(n, k=1)
    dist = np.hypot(*(pts[iu] - pts[ju]).T)
    keep = np.argsort(dist, kind="stable")[:m]
    edges = sorted(zip(iu[keep].tolist(), ju[keep].tolist()))
    return LabeledGraph(labels.tolist(), edges)


def shortest_path_lengths(g: LabeledGraph, source: int) -> list[float]:
    dist = [math.inf] * g.vertex_count
    dist[source] = 0
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for w in g.adjacency[u]:
            if dist[w] == math.inf:
                dist[w] = dist[u] + 1
                queue.append(w)
    return dist
