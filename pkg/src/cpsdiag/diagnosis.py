"""Multi-criteria root-cause selection over a causal subsystem graph.

Each candidate that can reach an unexplained symptom is scored by four
criteria (reachability, proximity, own anomaly status, anomaly-chain length),
combined as a weighted sum. Candidates within ``theta`` of the best score are
selected; the loop repeats on whatever symptoms remain unexplained.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .graph import CausalGraph, GraphError, HealthStateVector, longest_symptomatic_chain

WEIGHT_TOL = 1e-9


class DiagnosisError(ValueError):
    pass


@dataclass(frozen=True)
class CriterionWeights:
    reach: float = 0.25
    dist: float = 0.25
    anom: float = 0.25
    chain: float = 0.25

    def __post_init__(self) -> None:
        for name, v in zip(("reach", "dist", "anom", "chain"), self.as_tuple()):
            if not (isinstance(v, (int, float)) and math.isfinite(v) and 0.0 <= v <= 1.0):
                raise DiagnosisError(f"weight {name} must lie in [0, 1], got {v!r}")
        total = sum(self.as_tuple())
        if abs(total - 1.0) > WEIGHT_TOL:
            raise DiagnosisError(f"weights must sum to 1, got {total!r}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.reach, self.dist, self.anom, self.chain)

    @classmethod
    def parse(cls, text: str) -> CriterionWeights:
        """Parse ``"w1,w2,w3,w4"``."""
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != 4:
            raise DiagnosisError(f"expected four comma-separated weights, got {text!r}")
        try:
            return cls(*(float(p) for p in parts))
        except ValueError as exc:
            raise DiagnosisError(f"weights must be numbers: {text!r}") from exc


EQUAL_WEIGHTS = CriterionWeights()
# anomaly status emphasised, used for the water-treatment preset
SWAT_WEIGHTS = CriterionWeights(0.2, 0.2, 0.4, 0.2)


@dataclass(frozen=True)
class CandidateScore:
    candidate: str
    reach: float
    dist: float
    anom: float
    chain: float
    total: float

    def to_dict(self) -> dict:
        return {
            "candidate": self.candidate,
            "reach": self.reach,
            "dist": self.dist,
            "anom": self.anom,
            "chain": self.chain,
            "total": self.total,
        }


@dataclass(frozen=True)
class IterationTrace:
    unexplained_before: frozenset[str]
    scores: tuple[CandidateScore, ...]
    sigma_max: float
    selected: frozenset[str]
    explained_after: frozenset[str]

    def to_dict(self) -> dict:
        return {
            "unexplained_before": sorted(self.unexplained_before),
            "scores": [s.to_dict() for s in self.scores],
            "sigma_max": self.sigma_max,
            "selected": sorted(self.selected),
        }


@dataclass(frozen=True)
class DiagnosisResult:
    root_causes: frozenset[str]
    iterations: tuple[IterationTrace, ...]
    theta: float
    weights: CriterionWeights
    # BFS node+edge visits spent on reach/dist scoring; not serialized
    work: int = field(default=0, compare=False)

    def to_dict(self) -> dict:
        return {
            "root_causes": sorted(self.root_causes),
            "theta": self.theta,
            "weights": list(self.weights.as_tuple()),
            "iterations": [it.to_dict() for it in self.iterations],
        }


def candidate_set(g: CausalGraph, targets: Iterable[str]) -> set[str]:
    """All nodes whose (reflexive) reachable set meets ``targets``."""
    targets = list(targets)
    if not targets:
        return set()
    return g.ancestors_of(targets)


def _check_theta(theta: float) -> None:
    if not (isinstance(theta, (int, float)) and 0.0 <= theta <= 1.0):
        raise DiagnosisError(f"theta must lie in [0, 1], got {theta!r}")


def _combine(
    c: str,
    dist_from_c: dict[str, int],
    chain_len: int,
    targets: Sequence[str],
    anom: int,
    w: CriterionWeights,
) -> CandidateScore:
    n = len(targets)
    hit = 0
    prox = 0.0
    for s in targets:
        d = dist_from_c.get(s)
        if d is not None:
            hit += 1
            prox += 1.0 / (1.0 + d)
    reach = hit / n
    dist = prox / n
    chain = chain_len / n
    anom_f = float(anom)
    total = w.reach * reach + w.dist * dist + w.anom * anom_f + w.chain * chain
    return CandidateScore(c, reach, dist, anom_f, chain, total)


def score_candidate(
    g: CausalGraph,
    c: str,
    symptomatic: Iterable[str],
    h: HealthStateVector,
    w: CriterionWeights,
) -> CandidateScore:
    """Score one candidate against a target symptom set.

    ``h`` supplies only the candidate's own anomaly status; the other three
    criteria are measured against ``symptomatic``.
    """
    targets = sorted(set(symptomatic))
    if not targets:
        raise DiagnosisError("cannot score against an empty symptom set")
    g.check(c)
    if c not in candidate_set(g, targets):
        raise DiagnosisError(f"{c!r} reaches none of the target symptoms")
    if c not in h.states:
        raise DiagnosisError(f"no health state for {c!r}")
    dist = g.bfs_distances(c)
    chain_len = longest_symptomatic_chain(g, c, targets)
    return _combine(c, dist, chain_len, targets, h.states[c], w)


class _ChainTable:
    """Longest symptomatic chains for every start node, for one target set.

    Chains leaving a healthy node start at one of its symptomatic successors,
    so only one enumeration per target node is needed.
    """

    def __init__(self, g: CausalGraph, targets: set[str]) -> None:
        self.g = g
        self.targets = targets
        self._from_target = {t: longest_symptomatic_chain(g, t, targets) for t in targets}

    def __getitem__(self, start: str) -> int:
        if start in self.targets:
            return self._from_target[start]
        best = 0
        for s in self.g.successors(start):
            if s in self.targets:
                best = max(best, self._from_target[s])
        return best


def diagnose(
    g: CausalGraph,
    h: HealthStateVector,
    w: CriterionWeights = EQUAL_WEIGHTS,
    theta: float = 0.9,
) -> DiagnosisResult:
    """Iteratively select root causes until every symptom is explained."""
    try:
        h.check_against(g)
    except GraphError as exc:
        raise DiagnosisError(str(exc)) from exc
    _check_theta(theta)
    if not isinstance(w, CriterionWeights):
        raise DiagnosisError("weights must be a CriterionWeights instance")

    unexplained = set(h.symptomatic)
    if not unexplained:
        return DiagnosisResult(frozenset(), (), theta, w)

    # distances never change between iterations, so each BFS runs once
    bfs: dict[str, dict[str, int]] = {}
    work = 0
    roots: set[str] = set()
    trace: list[IterationTrace] = []

    while unexplained:
        targets = sorted(unexplained)
        candidates = sorted(candidate_set(g, targets))
        chains = _ChainTable(g, unexplained)
        scores = []
        for c in candidates:
            if c not in bfs:
                bfs[c] = g.bfs_distances(c)
                work += sum(1 + len(g.successors(v)) for v in bfs[c])
            scores.append(_combine(c, bfs[c], chains[c], targets, h.states[c], w))

        sigma_max = max(s.total for s in scores)
        cut = theta * sigma_max
        selected = {s.candidate for s in scores if s.total >= cut}
        explained = {u for u in unexplained if any(u in bfs[r] for r in selected)}
        if not explained:
            # unreachable with reflexive reachability; guards against an infinite loop
            raise DiagnosisError("iteration explained no symptoms")
        trace.append(
            IterationTrace(
                frozenset(unexplained),
                tuple(scores),
                sigma_max,
                frozenset(selected),
                frozenset(explained),
            )
        )
        roots |= selected
        unexplained -= explained

    return DiagnosisResult(frozenset(roots), tuple(trace), theta, w, work)
