"""Eulerization of query graphs, Euler node paths and masked node sequences."""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .graph import LabeledGraph

PAD = -1
CLS = -2
DEFAULT_WINDOW = 64
EXACT_MATCHING_LIMIT = 16


class StructureError(ValueError):
    pass


class CapacityError(ValueError):
    pass


@dataclass(frozen=True)
class EulerizedGraph:
    base: LabeledGraph
    duplicated_edges: tuple = ()

    def edge_multiset(self) -> list[tuple[int, int]]:
        return sorted(self.base.edges() + [tuple(sorted(e)) for e in self.duplicated_edges])

    def degrees(self) -> list[int]:
        deg = [self.base.degree(v) for v in range(self.base.vertex_count)]
        for u, v in self.duplicated_edges:
            deg[u] += 1
            deg[v] += 1
        return deg

    def odd_vertices(self) -> list[int]:
        return [v for v, d in enumerate(self.degrees()) if d % 2]


@dataclass(frozen=True)
class EulerPath:
    nodes: tuple
    position_ids: tuple = ()
    offset_r: int = 0
    window_N: int = DEFAULT_WINDOW

    def __len__(self):
        return len(self.nodes)

    def position_of(self) -> dict[int, int]:
        return dict(zip(self.nodes, self.position_ids))

    def occurrences(self) -> dict[int, list[int]]:
        occ: dict[int, list[int]] = {}
        for i, v in enumerate(self.nodes):
            occ.setdefault(v, []).append(i)
        return occ

    def dump(self) -> str:
        return "path: " + " ".join(map(str, self.nodes)) + " / pos: " + " ".join(map(str, self.position_ids))


def parse_path_dump(line: str) -> EulerPath:
    left, right = line.strip().split(" / ")
    nodes = tuple(int(x) for x in left.removeprefix("path:").split())
    pos = tuple(int(x) for x in right.removeprefix("pos:").split())
    return EulerPath(nodes, pos)


@dataclass
class MaskedNodeSequence:
    tokens: np.ndarray
    position_ids: np.ndarray
    target_query_vertex: int | None = None

    def __len__(self):
        return len(self.tokens)


# -- eulerization -----------------------------------------------------------


def _bfs_tree(g: LabeledGraph, source: int):
    parent = {source: None}
    dist = {source: 0}
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for w in g.adjacency[u]:
            if w not in parent:
                parent[w] = u
                dist[w] = dist[u] + 1
                queue.append(w)
    return parent, dist


def _path_edges(parent: dict, target: int) -> list[tuple[int, int]]:
    edges = []
    v = target
    while parent[v] is not None:
        p = parent[v]
        edges.append((min(p, v), max(p, v)))
        v = p
    return edges


def pairing_solver(odd: list[int], dist):
    """Exact minimum-weight perfect matching on subsets of ``odd`` (bitmask over indices).

    Returns ``best(mask) -> (cost, pairs)``; the memo is shared by all calls.
    """
    n = len(odd)

    @lru_cache(maxsize=None)
    def best(mask: int) -> tuple[int, tuple]:
        if mask == 0:
            return 0, ()
        i = (mask & -mask).bit_length() - 1
        rest = mask & ~(1 << i)
        top = None
        for j in range(i + 1, n):
            if rest >> j & 1:
                sub_cost, sub_pairs = best(rest & ~(1 << j))
                cost = dist[odd[i]][odd[j]] + sub_cost
                if top is None or cost < top[0]:
                    top = (cost, ((odd[i], odd[j]),) + sub_pairs)
        return top

    return best


def _greedy_pairing(odd: list[int], dist) -> list[tuple[int, int]]:
    candidates = sorted((dist[a][b], a, b) for a, b in itertools.combinations(odd, 2))
    free = set(odd)
    pairs = []
    for _, a, b in candidates:
        if len(free) <= 2:
            break
        if a in free and b in free:
            pairs.append((a, b))
            free -= {a, b}
    return pairs


def eulerize(q: LabeledGraph) -> EulerizedGraph:
    """Duplicate edges along shortest paths so that at most two odd vertices remain.

    All-but-two odd vertices are paired at minimum total distance. Among
    equally cheap choices the two left-over endpoints are chosen as far
    apart as possible, then lexicographically smallest.
    """
    if q.vertex_count == 0 or not q.is_connected():
        raise StructureError("eulerize needs a connected graph with at least one vertex")
    odd = [v for v in range(q.vertex_count) if q.degree(v) % 2]
    if len(odd) <= 2:
        return EulerizedGraph(q, ())
    trees = {v: _bfs_tree(q, v) for v in odd}
    dist = {a: trees[a][1] for a in odd}

    if len(odd) <= EXACT_MATCHING_LIMIT:
        solve = pairing_solver(odd, dist)
        full = (1 << len(odd)) - 1
        best = None
        for i, j in itertools.combinations(range(len(odd)), 2):
            cost, pairs = solve(full & ~(1 << i) & ~(1 << j))
            x, y = odd[i], odd[j]
            key = (cost, -dist[x][y], x, y)
            if best is None or key < best[0]:
                best = (key, pairs)
        pairs = list(best[1])
    else:
        pairs = _greedy_pairing(odd, dist)

    duplicated = []
    for a, b in pairs:
        duplicated.extend(_path_edges(trees[a][0], b))
    return EulerizedGraph(q, tuple(sorted(duplicated)))


# -- paths ------------------------------------------------------------------


def euler_path(eg: EulerizedGraph) -> EulerPath:
    """Hierholzer traversal taking the smallest-id unused neighbour first."""
    n = eg.base.vertex_count
    adj: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    for eid, (u, v) in enumerate(eg.edge_multiset()):
        adj[u].append((v, eid))
        adj[v].append((u, eid))
    for lst in adj:
        lst.sort()
    odd = eg.odd_vertices()
    if len(odd) > 2:
        raise StructureError("graph has more than two odd vertices")
    start = min(odd) if len(odd) == 2 else 0
    used = set()
    ptr = [0] * n
    stack = [start]
    out = []
    while stack:
        v = stack[-1]
        lst = adj[v]
        while ptr[v] < len(lst) and lst[ptr[v]][1] in used:
            ptr[v] += 1
        if ptr[v] < len(lst):
            w, eid = lst[ptr[v]]
            used.add(eid)
            stack.append(w)
        else:
            out.append(stack.pop())
    out.reverse()
    return EulerPath(tuple(out))


def cyclic_reindex(path: EulerPath, r: int = 0, N: int = DEFAULT_WINDOW) -> EulerPath:
    """Rank vertices by first occurrence, then shift the ranks by ``r`` modulo ``N``."""
    if not 0 <= r < N:
        raise ValueError(f"offset r={r} outside [0, {N})")
    rank: dict[int, int] = {}
    for v in path.nodes:
        if v not in rank:
            rank[v] = len(rank)
    if len(rank) > N:
        raise CapacityError(f"{len(rank)} distinct vertices exceed the position window N={N}")
    pos = tuple((rank[v] + r) % N for v in path.nodes)
    return EulerPath(path.nodes, pos, r, N)


def serialize(q: LabeledGraph, r: int = 0, N: int = DEFAULT_WINDOW) -> EulerPath:
    return cyclic_reindex(euler_path(eulerize(q)), r, N)


def reconstruct_graph(path: EulerPath) -> list[tuple[int, int]]:
    """Simple-graph edge set spelled out by consecutive path nodes."""
    return sorted({(min(a, b), max(a, b)) for a, b in zip(path.nodes, path.nodes[1:])})


# -- masked sequences -------------------------------------------------------


def build_masked_sequence(path: EulerPath, partial: dict, next_query_vertex: int | None) -> MaskedNodeSequence:
    if next_query_vertex is not None and next_query_vertex in partial:
        raise ValueError(f"query vertex {next_query_vertex} is already matched")
    tokens = np.full(len(path.nodes), PAD, dtype=np.int64)
    for i, u in enumerate(path.nodes):
        if u in partial:
            tokens[i] = partial[u]
        elif u == next_query_vertex:
            tokens[i] = CLS
    return MaskedNodeSequence(tokens, np.asarray(path.position_ids, dtype=np.int64), next_query_vertex)


class SequenceTemplate:
    """Incrementally updated token array for one query's Euler path."""

    def __init__(self, path: EulerPath):
        self.path = path
        self.positions = np.asarray(path.position_ids, dtype=np.int64)
        self.slots = {u: np.asarray(ix, dtype=np.int64) for u, ix in path.occurrences().items()}

    def tokens_for(self, partial: dict, next_query_vertex: int | None) -> np.ndarray:
        tokens = np.full(len(self.path.nodes), PAD, dtype=np.int64)
        for u, v in partial.items():
            tokens[self.slots[u]] = v
        if next_query_vertex is not None:
            tokens[self.slots[next_query_vertex]] = CLS
        return tokens

    def advance(self, tokens: np.ndarray, filled: int, value: int, next_query_vertex: int | None) -> np.ndarray:
        """Copy of ``tokens`` with ``filled`` set to ``value`` and CLS moved to the next vertex."""
        out = tokens.copy()
        out[self.slots[filled]] = value
        if next_query_vertex is not None:
            out[self.slots[next_query_vertex]] = CLS
        return out
