import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpsdiag.diagnosis import (
    EQUAL_WEIGHTS,
    CriterionWeights,
    DiagnosisError,
    candidate_set,
    diagnose,
    score_candidate,
)
from cpsdiag.graph import CausalGraph, HealthStateVector, reachable_set

from . import oracles

CHAIN = CausalGraph("ABC", [("A", "B"), ("B", "C")])
CHAIN_H = HealthStateVector.from_symptoms(CHAIN, {"B", "C"})

# frozen from oracles.score on the chain fixture
CHAIN_SCORES = {
    "A": (1.0, 5 / 12, 0.0, 1.0, 0.6041666666666666),
    "B": (1.0, 0.75, 1.0, 1.0, 0.9375),
    "C": (0.5, 0.5, 1.0, 0.5, 0.625),
}


@st.composite
def graph_and_symptoms(draw, max_nodes=6):
    n = draw(st.integers(1, max_nodes))
    nodes = [f"v{i}" for i in range(n)]
    slots = [(a, b) for a in nodes for b in nodes if a != b]
    edges = draw(st.lists(st.sampled_from(slots), unique=True, max_size=len(slots))) if slots else []
    sym = draw(st.sets(st.sampled_from(nodes), min_size=1))
    return CausalGraph(nodes, edges), sym


weights_st = st.lists(st.integers(0, 20), min_size=4, max_size=4).filter(lambda v: sum(v) > 0).map(
    lambda v: CriterionWeights(*(x / sum(v) for x in v[:3]), max(0.0, 1.0 - sum(x / sum(v) for x in v[:3])))
)


def test_oracle_reproduces_frozen_chain_scores():
    paths = oracles.all_paths("ABC", [("A", "B"), ("B", "C")])
    for c, expected in CHAIN_SCORES.items():
        s = oracles.score(paths, c, ["B", "C"], int(c in "BC"), (0.25,) * 4)
        assert (s["reach"], s["dist"], s["anom"], s["chain"], s["total"]) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("c", "ABC")
def test_chain_fixture_scores(c):
    s = score_candidate(CHAIN, c, {"B", "C"}, CHAIN_H, EQUAL_WEIGHTS)
    assert (s.reach, s.dist, s.anom, s.chain, s.total) == pytest.approx(CHAIN_SCORES[c], abs=1e-12)


def test_chain_fixture_diagnosis():
    r = diagnose(CHAIN, CHAIN_H, EQUAL_WEIGHTS, 1.0)
    assert r.root_causes == {"B"}
    assert len(r.iterations) == 1
    assert r.iterations[0].sigma_max == pytest.approx(0.9375, abs=1e-12)


@pytest.mark.parametrize(
    "theta,expected",
    [(1.0, {"B"}), (0.67, {"B"}), (0.66, {"B", "C"}), (0.65, {"B", "C"}), (0.64, {"A", "B", "C"}), (0.0, {"A", "B", "C"})],
)
def test_chain_fixture_theta_thresholds(theta, expected):
    assert diagnose(CHAIN, CHAIN_H, EQUAL_WEIGHTS, theta).root_causes == expected


def test_candidate_set_examples():
    assert candidate_set(CHAIN, {"C"}) == {"A", "B", "C"}
    two = CausalGraph("ABXY", [("A", "B"), ("X", "Y")])
    assert candidate_set(two, {"B"}) == {"A", "B"}
    cyc = CausalGraph("ABC", [("A", "B"), ("B", "C"), ("C", "A")])
    assert candidate_set(cyc, {"B"}) == {"A", "B", "C"}
    assert candidate_set(CHAIN, set()) == set()


def test_single_node():
    g = CausalGraph("X")
    h = HealthStateVector.from_symptoms(g, {"X"})
    for theta in (0.0, 0.5, 1.0):
        assert diagnose(g, h, CriterionWeights(0, 0, 1, 0), theta).root_causes == {"X"}


def test_two_disjoint_chains():
    g = CausalGraph("ABXY", [("A", "B"), ("X", "Y")])
    h = HealthStateVector.from_symptoms(g, {"B", "Y"})
    r = diagnose(g, h, EQUAL_WEIGHTS, 1.0)
    assert r.root_causes & {"A", "B"} and r.root_causes & {"X", "Y"}
    assert all(any(s in reachable_set(g, c) for c in r.root_causes) for s in ("B", "Y"))


def test_empty_symptoms_give_empty_result():
    h = HealthStateVector.from_symptoms(CHAIN, ())
    r = diagnose(CHAIN, h)
    assert r.root_causes == frozenset() and r.iterations == ()
    assert r.to_dict()["root_causes"] == []


def test_ties_select_all():
    g = CausalGraph("AB")
    h = HealthStateVector.from_symptoms(g, {"A", "B"})
    r = diagnose(g, h, EQUAL_WEIGHTS, 1.0)
    assert r.root_causes == {"A", "B"}
    assert len(r.iterations) == 1


def test_second_iteration_rescoring():
    g = CausalGraph("ABCDEFG", [("A", "B"), ("B", "C"), ("B", "D"), ("E", "F"), ("F", "G")])
    h = HealthStateVector.from_symptoms(g, set("BCDFG"))
    r = diagnose(g, h, EQUAL_WEIGHTS, 1.0)
    assert r.root_causes == {"B", "F"}
    first, second = r.iterations
    assert first.sigma_max == pytest.approx(0.6)
    assert first.unexplained_before == set("BCDFG")
    assert second.unexplained_before == {"F", "G"}
    assert second.sigma_max == pytest.approx(0.9375)


@pytest.mark.parametrize(
    "kwargs",
    [{"theta": 1.5}, {"theta": -0.1}, {"theta": float("nan")}],
)
def test_invalid_theta(kwargs):
    with pytest.raises(DiagnosisError, match="theta"):
        diagnose(CHAIN, CHAIN_H, **kwargs)


def test_mismatched_health_vector():
    with pytest.raises(DiagnosisError):
        diagnose(CHAIN, HealthStateVector({"A": 1}))


@pytest.mark.parametrize(
    "text",
    ["0.25,0.25,0.25", "0.5,0.5,0.5,0.5", "1.2,-0.2,0,0", "a,b,c,d"],
)
def test_weight_validation(text):
    with pytest.raises(DiagnosisError):
        CriterionWeights.parse(text)


def test_weight_sum_tolerance():
    CriterionWeights(0.1, 0.2, 0.3, 0.4 + 5e-10)
    with pytest.raises(DiagnosisError):
        CriterionWeights(0.1, 0.2, 0.3, 0.4 + 5e-9)


def test_score_candidate_preconditions():
    with pytest.raises(DiagnosisError):
        score_candidate(CHAIN, "C", {"A"}, CHAIN_H, EQUAL_WEIGHTS)
    with pytest.raises(DiagnosisError):
        score_candidate(CHAIN, "A", set(), CHAIN_H, EQUAL_WEIGHTS)


def test_json_shape_is_sorted_and_stable():
    g = CausalGraph(["z", "y", "x"], [("z", "y"), ("y", "x")])
    h = HealthStateVector.from_symptoms(g, {"x", "y"})
    d = diagnose(g, h, EQUAL_WEIGHTS, 0.0).to_dict()
    assert list(d) == ["root_causes", "theta", "weights", "iterations"]
    assert d["root_causes"] == ["x", "y", "z"]
    assert [s["candidate"] for s in d["iterations"][0]["scores"]] == ["x", "y", "z"]
    assert set(d["iterations"][0]) == {"unexplained_before", "scores", "sigma_max", "selected"}
    assert json.dumps(d, sort_keys=True) == json.dumps(diagnose(g, h, EQUAL_WEIGHTS, 0.0).to_dict(), sort_keys=True)


def test_weight_degeneracy_source_maximises_reach():
    g = CausalGraph("ABCD", [("A", "B"), ("B", "C"), ("C", "D")])
    h = HealthStateVector.from_symptoms(g, set("ABCD"))
    r = diagnose(g, h, CriterionWeights(1, 0, 0, 0), 1.0)
    assert "A" in r.iterations[0].selected


# properties


@settings(max_examples=200, deadline=None)
@given(graph_and_symptoms(), weights_st, st.floats(0, 1))
def test_matches_reference_loop(gs, w, theta):
    g, sym = gs
    h = HealthStateVector.from_symptoms(g, sym)
    r = diagnose(g, h, w, theta)
    roots, history = oracles.diagnose(list(g.nodes), sorted(g.edges), sym, w.as_tuple(), theta)
    assert r.root_causes == roots
    assert [it.selected for it in r.iterations] == history


@settings(max_examples=200, deadline=None)
@given(graph_and_symptoms(), weights_st, st.floats(0, 1))
def test_invariants(gs, w, theta):
    g, sym = gs
    h = HealthStateVector.from_symptoms(g, sym)
    r = diagnose(g, h, w, theta)
    # explanation completeness
    for s in sym:
        assert any(s in reachable_set(g, c) for c in r.root_causes)
    assert 1 <= len(r.iterations) <= len(sym)
    for it in r.iterations:
        assert it.sigma_max == max(s.total for s in it.scores)
        assert it.selected == {s.candidate for s in it.scores if s.total >= theta * it.sigma_max}
        assert it.selected
        for s in it.scores:
            for v in (s.reach, s.dist, s.anom, s.chain, s.total):
                assert 0.0 <= v <= 1.0 + 1e-12
            combo = w.reach * s.reach + w.dist * s.dist + w.anom * s.anom + w.chain * s.chain
            assert abs(s.total - combo) <= 1e-12
    first = r.iterations[0]
    assert {s.candidate for s in first.scores} == candidate_set(g, sym)


@settings(max_examples=100, deadline=None)
@given(graph_and_symptoms(), weights_st, st.floats(0, 1), st.floats(0, 1))
def test_single_pass_selection_is_monotone_in_theta(gs, w, t1, t2):
    g, sym = gs
    lo, hi = sorted((t1, t2))
    h = HealthStateVector.from_symptoms(g, sym)
    a = diagnose(g, h, w, lo).iterations[0].selected
    b = diagnose(g, h, w, hi).iterations[0].selected
    assert b <= a


@settings(max_examples=100, deadline=None)
@given(graph_and_symptoms(), weights_st)
def test_theta_zero_selects_every_positive_candidate(gs, w):
    g, sym = gs
    h = HealthStateVector.from_symptoms(g, sym)
    first = diagnose(g, h, w, 0.0).iterations[0]
    assert first.selected >= {s.candidate for s in first.scores if s.total > 0}


def test_determinism_on_random_cyclic_graph():
    rng = random.Random(5)
    nodes = [f"s{i}" for i in range(30)]
    edges = {(a, b) for a in nodes for b in nodes if a != b and rng.random() < 0.08}
    g = CausalGraph(nodes, edges)
    h = HealthStateVector.from_symptoms(g, rng.sample(nodes, 8))
    a = json.dumps(diagnose(g, h).to_dict(), sort_keys=True)
    b = json.dumps(diagnose(g, h).to_dict(), sort_keys=True)
    assert a == b
