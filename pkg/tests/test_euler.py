import itertools
from collections import Counter
from pathlib import Path

import networkx as nx
import numpy as np
import pytest

from navmatch.euler import (
    CLS,
    PAD,
    CapacityError,
    EulerPath,
    StructureError,
    SequenceTemplate,
    build_masked_sequence,
    cyclic_reindex,
    euler_path,
    eulerize,
    parse_path_dump,
    reconstruct_graph,
    serialize,
)
from navmatch.graph import LabeledGraph, random_labeled_graph

GOLDEN = Path(__file__).parent / "data" / "euler_golden.txt"

# a, b, c, d, e = 0..4
TAILED = LabeledGraph([0, 1, 2, 3, 4], [(0, 2), (1, 2), (1, 3), (2, 3), (3, 4)])

SHAPES = {
    "tailed": TAILED,
    "square": LabeledGraph([0] * 4, [(0, 1), (1, 2), (2, 3), (0, 3)]),
    "edge": LabeledGraph([0, 0], [(0, 1)]),
    "star3": LabeledGraph([0] * 4, [(0, 1), (0, 2), (0, 3)]),
}


def min_pairing(g, odd):
    """All ways to leave two odd vertices out and pair the rest, by brute force."""
    dist = dict(nx.all_pairs_shortest_path_length(nx.Graph(g.edges())))

    def pair_up(rest):
        if not rest:
            return 0
        a = rest[0]
        return min(dist[a][b] + pair_up([x for x in rest[1:] if x != b]) for b in rest[1:])

    return min(pair_up([v for v in odd if v not in keep]) for keep in itertools.combinations(odd, 2))


def walk_edges(nodes):
    return Counter(tuple(sorted(p)) for p in zip(nodes, nodes[1:]))


def test_tailed_triangle_duplicates_cd():
    eg = eulerize(TAILED)
    assert eg.duplicated_edges == ((2, 3),)
    assert eg.odd_vertices() == [0, 4]


def test_tailed_triangle_path_and_tokens():
    path = serialize(TAILED, r=1)
    assert path.nodes == (0, 2, 1, 3, 2, 3, 4)
    seq = build_masked_sequence(path, {0: 6, 2: 4}, 1)
    assert seq.tokens.tolist() == [6, 4, CLS, PAD, 4, PAD, PAD]
    first = build_masked_sequence(path, {}, 0)
    assert first.tokens.tolist() == [CLS] + [PAD] * 6


def test_complete_sequence_has_no_masks():
    path = serialize(TAILED)
    seq = build_masked_sequence(path, {u: 10 + u for u in range(5)}, None)
    assert PAD not in seq.tokens and CLS not in seq.tokens
    assert seq.target_query_vertex is None


def test_next_vertex_already_matched():
    with pytest.raises(ValueError):
        build_masked_sequence(serialize(TAILED), {1: 3}, 1)


def test_cycle_needs_no_duplicates():
    cyc = LabeledGraph([0] * 6, [(i, (i + 1) % 6) for i in range(6)])
    assert eulerize(cyc).duplicated_edges == ()
    assert euler_path(eulerize(cyc)).nodes[0] == 0


def test_single_edge_path():
    g = LabeledGraph([1, 2], [(0, 1)])
    assert euler_path(eulerize(g)).nodes == (0, 1)
    assert reconstruct_graph(euler_path(eulerize(g))) == [(0, 1)]


def test_single_vertex_path():
    path = serialize(LabeledGraph([3]))
    assert path.nodes == (0,) and path.position_ids == (0,)


def test_disconnected_rejected():
    with pytest.raises(StructureError):
        eulerize(LabeledGraph([0, 0, 0], [(0, 1)]))
    with pytest.raises(StructureError):
        eulerize(LabeledGraph([]))


def test_reindex_offsets():
    path = euler_path(eulerize(TAILED))
    assert cyclic_reindex(path, 0).position_ids == (0, 1, 2, 3, 1, 3, 4)
    assert cyclic_reindex(path, 1).position_ids == (1, 2, 3, 4, 2, 4, 5)
    tri = euler_path(eulerize(LabeledGraph([0] * 3, [(0, 1), (1, 2), (0, 2)])))
    assert sorted(set(cyclic_reindex(tri, 63, 64).position_ids)) == [0, 1, 63]
    with pytest.raises(CapacityError):
        cyclic_reindex(path, 0, 4)
    with pytest.raises(ValueError):
        cyclic_reindex(path, 64, 64)


def test_golden_dumps():
    for line in GOLDEN.read_text().splitlines():
        if line.startswith("#"):
            continue
        name, r, dump = (x.strip() for x in line.split("|"))
        path = serialize(SHAPES[name], int(r))
        assert path.dump() == dump, name
        back = parse_path_dump(dump)
        assert back.nodes == path.nodes and back.position_ids == path.position_ids


def random_connected(rng, max_n=20):
    n = int(rng.integers(1, max_n + 1))
    return random_labeled_graph(n, float(rng.uniform(0, 0.4)), 3, rng, connected=True)


@pytest.mark.parametrize("seed", range(40))
def test_round_trip_and_parity(seed):
    rng = np.random.default_rng(seed)
    g = random_connected(rng)
    eg = eulerize(g)
    assert len(eg.odd_vertices()) in (0, 2)
    assert set(eg.duplicated_edges) <= set(g.edges())
    path = euler_path(eg)
    assert len(path) == len(eg.edge_multiset()) + 1
    assert walk_edges(path.nodes) == Counter(eg.edge_multiset())
    if eg.odd_vertices():
        assert path.nodes[0] == min(eg.odd_vertices())
    assert reconstruct_graph(path) == g.edges()
    pos = cyclic_reindex(path, int(rng.integers(64))).position_of()
    assert len(set(pos.values())) == len(pos) == g.vertex_count


@pytest.mark.parametrize("seed", range(30))
def test_duplicates_are_minimal(seed):
    rng = np.random.default_rng(1000 + seed)
    while True:
        g = random_labeled_graph(int(rng.integers(6, 14)), 0.3, 2, rng, connected=True)
        odd = [v for v in range(g.vertex_count) if g.degree(v) % 2]
        if 4 <= len(odd) <= 8:
            break
    assert len(eulerize(g).duplicated_edges) == min_pairing(g, odd)


def test_large_odd_set_falls_back_to_greedy():
    # star with 19 leaves: 20 odd vertices, above the exact limit
    star = LabeledGraph([0] * 20, [(0, k) for k in range(1, 20)])
    eg = eulerize(star)
    assert len(eg.odd_vertices()) == 2
    assert reconstruct_graph(euler_path(eg)) == star.edges()


@pytest.mark.parametrize("seed", range(10))
def test_template_matches_builder(seed):
    rng = np.random.default_rng(seed)
    g = random_connected(rng, 12)
    path = serialize(g, int(rng.integers(64)))
    t = SequenceTemplate(path)
    order = [int(x) for x in rng.permutation(g.vertex_count)]
    partial = {}
    tokens = t.tokens_for({}, order[0])
    for k, u in enumerate(order):
        nxt = order[k + 1] if k + 1 < len(order) else None
        want = build_masked_sequence(path, partial, u).tokens
        assert np.array_equal(t.tokens_for(partial, u), want)
        assert np.array_equal(tokens, want)
        # every occurrence of a vertex carries one token
        for slots in path.occurrences().values():
            assert len(set(tokens[slots].tolist())) == 1
        tokens = t.advance(tokens, u, 100 + u, nxt)
        partial[u] = 100 + u
    assert np.array_equal(tokens, build_masked_sequence(path, partial, None).tokens)


def test_dump_format():
    p = EulerPath((0, 1), (5, 6))
    assert p.dump() == "path: 0 1 / pos: 5 6"
