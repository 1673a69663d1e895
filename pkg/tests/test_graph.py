import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpsdiag.graph import (
    CausalGraph,
    GraphError,
    HealthStateVector,
    UnknownNodeError,
    longest_symptomatic_chain,
    reachable_set,
    shortest_distance,
)

from . import oracles

CHAIN = CausalGraph("ABC", [("A", "B"), ("B", "C")])


@st.composite
def small_graphs(draw, max_nodes=8):
    n = draw(st.integers(1, max_nodes))
    nodes = [f"n{i}" for i in range(n)]
    slots = [(a, b) for a in nodes for b in nodes if a != b]
    edges = draw(st.lists(st.sampled_from(slots), unique=True, max_size=min(len(slots), 3 * n))) if slots else []
    return CausalGraph(nodes, edges)


def test_reachable_examples():
    assert reachable_set(CHAIN, "A") == {"A", "B", "C"}
    assert reachable_set(CausalGraph("AB", [("A", "B"), ("B", "A")]), "B") == {"A", "B"}
    assert reachable_set(CausalGraph("X"), "X") == {"X"}


def test_shortest_distance_examples():
    assert shortest_distance(CHAIN, "A", "C") == 2
    assert shortest_distance(CHAIN, "C", "A") is None
    cycle = CausalGraph("ABC", [("A", "B"), ("B", "C"), ("C", "A")])
    assert shortest_distance(cycle, "B", "A") == 2
    assert shortest_distance(cycle, "B", "B") == 0


def test_chain_examples():
    assert longest_symptomatic_chain(CHAIN, "A", {"B", "C"}) == 2
    assert longest_symptomatic_chain(CHAIN, "B", {"B", "C"}) == 2
    assert longest_symptomatic_chain(CHAIN, "A", set()) == 0


def test_chain_cut_by_healthy_node():
    g = CausalGraph("ABCD", [("A", "B"), ("B", "C"), ("C", "D")])
    assert longest_symptomatic_chain(g, "A", {"A", "C", "D"}) == 1
    assert longest_symptomatic_chain(g, "B", {"A", "C", "D"}) == 2


def test_chain_on_cycle_counts_each_node_once():
    g = CausalGraph("ABC", [("A", "B"), ("B", "C"), ("C", "A")])
    assert longest_symptomatic_chain(g, "A", {"A", "B", "C"}) == 3


def test_unknown_node_errors_name_the_id():
    with pytest.raises(UnknownNodeError, match="'Z'"):
        reachable_set(CHAIN, "Z")
    with pytest.raises(UnknownNodeError):
        shortest_distance(CHAIN, "A", "Z")
    with pytest.raises(UnknownNodeError):
        longest_symptomatic_chain(CHAIN, "Z", {"A"})


@pytest.mark.parametrize(
    "nodes,edges,msg",
    [
        (["A", "A"], [], "duplicate subsystem"),
        (["A", ""], [], "non-empty"),
        (["A", "B"], [("A", "C")], "unknown subsystem"),
        (["A"], [("A", "A")], "self-loop"),
        (["A", "B"], [("A", "B"), ("A", "B")], "duplicate edge"),
    ],
)
def test_construction_rejects(nodes, edges, msg):
    with pytest.raises(GraphError, match=msg):
        CausalGraph(nodes, edges)


def test_json_round_trip(tmp_path):
    g = CausalGraph("ABC", [("A", "B"), ("C", "A")])
    p = tmp_path / "g.json"
    g.dump(p)
    assert CausalGraph.load(p) == g


def test_json_rejects_unknown_keys():
    with pytest.raises(GraphError, match="unknown"):
        CausalGraph.from_dict({"nodes": ["A"], "edges": [], "weights": {}})


def test_malformed_json_reports_line(tmp_path):
    p = tmp_path / "g.json"
    p.write_text('{\n  "nodes": ["A",\n}\n')
    with pytest.raises(GraphError, match="line 3"):
        CausalGraph.load(p)


def test_dot_marks_symptoms_and_root_causes():
    dot = CHAIN.to_dot({"B", "C"}, {"B"})
    assert '"B" [fillcolor=yellow, penwidth=3];' in dot
    assert '"C" [fillcolor=yellow];' in dot
    assert '"A";' in dot
    assert '"A" -> "B";' in dot


def test_health_vector_validation():
    with pytest.raises(GraphError):
        HealthStateVector({"A": 2})
    h = HealthStateVector.from_symptoms(CHAIN, {"B"})
    assert h.symptomatic == {"B"}
    h.check_against(CHAIN)
    with pytest.raises(GraphError, match="missing"):
        HealthStateVector({"A": 0}).check_against(CHAIN)


def test_graph_is_frozen_and_serializable():
    with pytest.raises(Exception):
        CHAIN.nodes = ()
    assert json.loads(json.dumps(CHAIN.to_dict()))["nodes"] == ["A", "B", "C"]


# properties


@given(small_graphs())
def test_reflexive(g):
    for v in g.nodes:
        assert v in reachable_set(g, v)


@given(small_graphs(), st.data())
def test_adding_edge_never_shrinks_reach(g, data):
    if len(g) < 2:
        return
    a, b = data.draw(st.permutations(list(g.nodes)))[:2]
    if (a, b) in g.edges:
        return
    g2 = g.with_edge(a, b)
    for v in g.nodes:
        assert reachable_set(g, v) <= reachable_set(g2, v)


@given(small_graphs())
def test_distance_absent_iff_unreachable(g):
    for a in g.nodes:
        r = reachable_set(g, a)
        for b in g.nodes:
            assert (shortest_distance(g, a, b) is None) == (b not in r)


@given(small_graphs(), st.data())
def test_chain_bounded_by_symptom_count(g, data):
    sym = data.draw(st.sets(st.sampled_from(g.nodes)))
    for v in g.nodes:
        assert 0 <= longest_symptomatic_chain(g, v, sym) <= len(sym)


@settings(max_examples=150, deadline=None)
@given(small_graphs(max_nodes=8), st.data())
def test_agrees_with_path_enumeration(g, data):
    sym = data.draw(st.sets(st.sampled_from(g.nodes)))
    edges = sorted(g.edges)
    paths = oracles.all_paths(list(g.nodes), edges)
    for a in g.nodes:
        assert reachable_set(g, a) == oracles.reach(paths, a)
        assert longest_symptomatic_chain(g, a, sym) == oracles.chain(paths, a, sym)
        for b in g.nodes:
            assert shortest_distance(g, a, b) == oracles.distance(paths, a, b)
