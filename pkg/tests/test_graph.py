import itertools

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from navmatch.graph import (
    GraphFormatError,
    LabeledGraph,
    OracleCapError,
    SamplingError,
    brute_force_enumerate,
    format_graph,
    generate_query_set,
    geometric_graph,
    load_graph,
    load_query_set,
    parse_graph,
    permutation_enumerate,
    random_labeled_graph,
    random_walk_sample,
    save_graph,
    save_query_set,
    verify_match,
)


def text(*lines):
    return "\n".join(lines) + "\n"


def test_parse_two_vertex_graph():
    g = parse_graph(text("t 2 1", "v 0 3 1", "v 1 3 1", "e 0 1"))
    assert g.vertex_count == 2
    assert g.labels == (3, 3)
    assert g.edges() == [(0, 1)]


def test_parse_isolated_vertex():
    g = parse_graph(text("t 1 0", "v 0 5 0"))
    assert g.labels == (5,)
    assert g.edge_count == 0


@pytest.mark.parametrize(
    "body, lineno, fragment",
    [
        (("t 2 1", "v 0 0 1", "v 1 0 1", "e 0 2"), 4, "vertex id out of range"),
        (("t 2 1", "v 0 0 1", "v 1 0 1"), 4, "unexpected end of file"),
        (("t 2 1", "v 0 0 2", "v 1 0 1", "e 0 1"), 2, "declares degree"),
        (("t 2 1", "v 1 0 1", "v 0 0 1", "e 0 1"), 2, "out of order"),
        (("t 2 2", "v 0 0 2", "v 1 0 2", "e 0 1", "e 1 0"), 5, "duplicate edge"),
        (("t 1 1", "v 0 0 2", "e 0 0"), 3, "self-loop"),
        (("t 1 0", "v 0 x 0"), 2, "non-integer"),
        (("t 1 0", "v 0 0 0", "e 0 0"), 3, "content beyond"),
    ],
)
def test_parse_errors_name_line(body, lineno, fragment):
    with pytest.raises(GraphFormatError) as exc:
        parse_graph(text(*body))
    assert exc.value.lineno == lineno
    assert fragment in str(exc.value)
    assert str(exc.value).startswith(f"line {lineno}:")


def test_round_trip_file(tmp_path):
    rng = np.random.default_rng(3)
    g = random_labeled_graph(25, 0.2, 4, rng)
    save_graph(g, tmp_path / "g.graph")
    raw = (tmp_path / "g.graph").read_bytes()
    assert b"\r" not in raw and raw.endswith(b"\n")
    h = load_graph(tmp_path / "g.graph")
    assert h == g
    assert h.adjacency == g.adjacency
    assert format_graph(h) == raw.decode()


def test_graph_rejects_bad_edges():
    with pytest.raises(ValueError):
        LabeledGraph([0, 0], [(0, 0)])
    with pytest.raises(ValueError):
        LabeledGraph([0, 0], [(0, 1), (1, 0)])
    with pytest.raises(ValueError):
        LabeledGraph([0], [(0, 1)])


@given(st.integers(0, 12), st.floats(0, 1), st.integers(0, 2**31))
@settings(max_examples=60, deadline=None)
def test_adjacency_invariants(n, p, seed):
    g = random_labeled_graph(n, p, 3, np.random.default_rng(seed))
    for u in range(n):
        assert list(g.adjacency[u]) == sorted(set(g.adjacency[u]))
        assert u not in g.adjacency[u]
        for w in g.adjacency[u]:
            assert u in g.adjacency[w]
    assert 2 * g.edge_count == sum(len(a) for a in g.adjacency)


# -- sampling


def test_walk_of_one_is_start():
    g = LabeledGraph([0, 1, 2], [(0, 1), (1, 2)])
    q, origin = random_walk_sample(g, 2, 1, np.random.default_rng(0))
    assert q.vertex_count == 1 and origin == [2] and q.labels == (2,)


def test_star_sample_is_path_through_center():
    star = LabeledGraph([0, 1, 1, 1, 1], [(0, k) for k in range(1, 5)])
    for seed in range(20):
        q, origin = random_walk_sample(star, 0, 3, np.random.default_rng(seed))
        assert origin[0] == 0
        assert sorted(q.degree(u) for u in range(3)) == [1, 1, 2]
        assert q.degree(0) == 2


def test_walk_too_large_for_component():
    g = LabeledGraph([0, 0, 0], [(0, 1)])
    with pytest.raises(SamplingError):
        random_walk_sample(g, 0, 3, np.random.default_rng(0))


def is_induced(q, g, origin):
    for a, b in itertools.combinations(range(q.vertex_count), 2):
        if q.has_edge(a, b) != g.has_edge(origin[a], origin[b]):
            return False
    return all(q.labels[u] == g.labels[origin[u]] for u in range(q.vertex_count))


@pytest.mark.parametrize("seed", range(10))
def test_walk_sample_connected_and_induced(seed):
    rng = np.random.default_rng(seed)
    g = random_labeled_graph(40, 0.08, 5, rng, connected=True)
    k = int(rng.integers(1, 15))
    q, origin = random_walk_sample(g, int(rng.integers(40)), k, rng)
    assert q.vertex_count == k == len(set(origin))
    assert nx.is_connected(nx.Graph(q.edges())) if k > 1 else True
    assert is_induced(q, g, origin)


def test_query_set_deterministic(tmp_path):
    g = geometric_graph(200, 4, 5.0, seed=1)
    a = generate_query_set(g, 12, 6, seed=5, source="geo")
    b = generate_query_set(g, 12, 6, seed=5, source="geo")
    save_query_set(a, tmp_path / "a")
    save_query_set(b, tmp_path / "b")
    for name in sorted(p.name for p in (tmp_path / "a").iterdir()):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    back = load_query_set(tmp_path / "a")
    assert back.queries == a.queries and back.seed == 5 and back.source == "geo"
    for q, origin in zip(a.queries, a.origins):
        assert q.is_connected() and is_induced(q, g, origin)
        assert q.label_set() <= g.label_set()
        assert brute_force_enumerate(q, g)


def test_query_set_single_vertex():
    g = geometric_graph(30, 3, 4.0, seed=2)
    qs = generate_query_set(g, 1, 1, seed=0)
    assert len(qs) == 1 and qs.queries[0].vertex_count == 1


def test_query_set_gives_up():
    g = LabeledGraph([0, 0, 0], [(0, 1)])
    with pytest.raises(SamplingError):
        generate_query_set(g, 2, 3, seed=0, retry_budget=50)


def test_dense_query_filter():
    g = geometric_graph(500, 8, 6.0, seed=7)
    qs = generate_query_set(g, 20, 8, seed=3, min_avg_degree=3.0)
    assert all(2 * q.edge_count / 8 >= 3.0 for q in qs)


def test_geometric_graph_edge_count():
    g = geometric_graph(500, 8, 6.0, seed=7)
    assert g.edge_count == 1500
    assert g.label_set() == set(range(8))


# -- oracle


def test_oracle_single_vertex():
    q = LabeledGraph([3])
    g = LabeledGraph([3, 4])
    assert brute_force_enumerate(q, g) == {((0, 0),)}


def test_oracle_triangle_automorphisms():
    tri = LabeledGraph([0, 0, 0], [(0, 1), (1, 2), (0, 2)])
    assert len(brute_force_enumerate(tri, tri)) == 6


def test_oracle_edge_in_path():
    q = LabeledGraph([1, 2], [(0, 1)])
    g = LabeledGraph([1, 2, 1], [(0, 1), (1, 2)])
    assert brute_force_enumerate(q, g) == {((0, 0), (1, 1)), ((0, 2), (1, 1))}


def test_oracle_cap():
    q = LabeledGraph([0] * 9, [(i, i + 1) for i in range(8)])
    with pytest.raises(OracleCapError):
        brute_force_enumerate(q, q)


def test_verify_match_basics():
    g = LabeledGraph([0, 1, 0], [(0, 1), (1, 2)])
    assert verify_match(g, g, [(0, 0), (1, 1), (2, 2)])
    assert not verify_match(g, g, [(0, 0), (1, 1), (2, 0)])
    assert not verify_match(g, g, [(0, 1), (1, 0), (2, 2)])


@pytest.mark.parametrize("seed", range(25))
def test_oracle_agrees_with_permutations_and_networkx(seed):
    rng = np.random.default_rng(seed)
    g = random_labeled_graph(int(rng.integers(3, 9)), 0.45, 2, rng)
    q = random_labeled_graph(int(rng.integers(1, 5)), 0.5, 2, rng, connected=True)
    found = brute_force_enumerate(q, g)
    assert found == permutation_enumerate(q, g)
    assert all(verify_match(q, g, m) for m in found)

    G = nx.Graph()
    G.add_nodes_from((v, {"l": lab}) for v, lab in enumerate(g.labels))
    G.add_edges_from(g.edges())
    Q = nx.Graph()
    Q.add_nodes_from((u, {"l": lab}) for u, lab in enumerate(q.labels))
    Q.add_edges_from(q.edges())
    gm = nx.algorithms.isomorphism.GraphMatcher(G, Q, node_match=lambda a, b: a["l"] == b["l"])
    # monomorphisms: query edges must be present, extra data edges allowed
    ref = {tuple(sorted((u, v) for v, u in m.items())) for m in gm.subgraph_monomorphisms_iter()}
    assert found == ref
