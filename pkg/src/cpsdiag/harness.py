"""Experiment drivers: canonical scenarios, theta sweeps, simulated trial studies."""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .diagnosis import EQUAL_WEIGHTS, CriterionWeights, DiagnosisResult, diagnose
from .graph import CausalGraph, HealthStateVector, reachable_set
from .ingest import AnnotatedRun
from .simulator import TrialConfig, TrialDataset, make_trial
from .symptoms import (
    DEFAULT_WINDOW,
    BinarizationConfig,
    ResidualModel,
    binarize,
    calibrate_thresholds,
    fit_linear_subspace_model,
    health_series,
    majority_symptoms,
)

log = logging.getLogger(__name__)

DEFAULT_THETAS = tuple(round(1.0 - 0.1 * i, 1) for i in range(11))


@dataclass(frozen=True)
class Scenario:
    name: str
    description: str
    graph: CausalGraph
    symptoms: frozenset[str]

    @property
    def health(self) -> HealthStateVector:
        return HealthStateVector.from_symptoms(self.graph, self.symptoms)


def _scenario(name, description, nodes, edges, symptoms) -> Scenario:
    return Scenario(name, description, CausalGraph(nodes, edges), frozenset(symptoms))


SCENARIOS: dict[str, Scenario] = {
    s.name: s
    for s in (
        _scenario(
            "acyclic-single",
            "chain with one symptom cluster",
            "ABCD",
            [("A", "B"), ("B", "C"), ("C", "D")],
            "BCD",
        ),
        _scenario(
            "acyclic-multi",
            "two independent components, one symptom cluster each",
            "ABCDEFG",
            [("A", "B"), ("B", "C"), ("B", "D"), ("E", "F"), ("F", "G")],
            "BCDFG",
        ),
        _scenario(
            "cyclic-single",
            "ring of four with one chord",
            "ABCD",
            [("A", "B"), ("B", "C"), ("C", "D"), ("D", "A"), ("B", "D")],
            "CD",
        ),
        _scenario(
            "cyclic-multi",
            "two feedback loops joined through a healthy node, two symptom clusters",
            "ABCDEFGHI",
            [
                ("A", "B"),
                ("B", "C"),
                ("C", "A"),
                ("C", "D"),
                ("D", "E"),
                ("E", "D"),
                ("E", "F"),
                ("F", "G"),
                ("G", "H"),
                ("H", "F"),
                ("H", "I"),
            ],
            "DEGHI",
        ),
    )
}


def run_scenario(
    graph: CausalGraph,
    h: HealthStateVector,
    w: CriterionWeights = EQUAL_WEIGHTS,
    theta: float = 1.0,
) -> DiagnosisResult:
    return diagnose(graph, h, w, theta)


@dataclass(frozen=True)
class SweepRow:
    theta: float
    root_causes: frozenset[str]
    newly_added: frozenset[str]


@dataclass
class SweepReport:
    rows: list[SweepRow]
    # thetas at which a root cause of the previous row disappeared
    nesting_violations: list[float] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["theta", "all_root_causes", "newly_added"])
        for r in self.rows:
            w.writerow([f"{r.theta:.2f}", " ".join(sorted(r.root_causes)), " ".join(sorted(r.newly_added))])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "rows": [
                {"theta": r.theta, "root_causes": sorted(r.root_causes), "newly_added": sorted(r.newly_added)}
                for r in self.rows
            ],
            "nesting_violations": self.nesting_violations,
        }


def theta_sweep(
    graph: CausalGraph,
    h: HealthStateVector,
    w: CriterionWeights = EQUAL_WEIGHTS,
    thetas: Sequence[float] = DEFAULT_THETAS,
) -> SweepReport:
    """Diagnose at each theta and keep only the rows where the set changes.

    A set that loses members as theta drops is logged as a warning; the
    iterative algorithm does not guarantee nesting.
    """
    thetas = list(thetas)
    if any(b >= a for a, b in zip(thetas, thetas[1:])):
        raise ValueError("thetas must be strictly descending")
    rows: list[SweepRow] = []
    violations = []
    prev: frozenset[str] | None = None
    for theta in thetas:
        roots = diagnose(graph, h, w, theta).root_causes
        if prev is not None and roots == prev:
            continue
        if prev is not None and not prev <= roots:
            log.warning("theta %.2f dropped root causes %s", theta, sorted(prev - roots))
            violations.append(theta)
        rows.append(SweepRow(theta, roots, roots - (prev or frozenset())))
        prev = roots
    return SweepReport(rows, violations)


# simulated trial study

CATEGORIES = ("missed_symptom", "missed_cause", "no_reduction", "reduced_set", "perfect")


def classify_outcome(s_true: str, s_sym: Iterable[str], s_causal: Iterable[str]) -> str:
    sym = set(s_sym)
    causal = set(s_causal)
    if s_true not in sym:
        return "missed_symptom"
    if s_true not in causal:
        return "missed_cause"
    if len(causal) >= len(sym):
        return "no_reduction"
    if causal == {s_true}:
        return "perfect"
    return "reduced_set"


@dataclass(frozen=True)
class TrialOutcome:
    index: int
    seed: int
    category: str
    s_true: str
    s_sym: tuple[str, ...]
    s_causal: tuple[str, ...]
    n_nodes: int
    n_signals: int
    fault_scale: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SymptomSettings:
    window_len: int = DEFAULT_WINDOW
    latent_dim: int = 4
    percentile: float = 75.0
    smoothing_window: int = 0


def interval_windows(frame_timestamps: Sequence, start, end, window_len: int) -> tuple[int, int]:
    """Row range of ``frame`` covering ``[start, end)``; windows inside it lie wholly in the interval."""
    ts = list(frame_timestamps)
    lo = next((i for i, t in enumerate(ts) if t >= start), len(ts))
    hi = next((i for i, t in enumerate(ts) if t >= end), len(ts))
    return lo, hi


def fault_symptoms(
    model: ResidualModel,
    cfg: BinarizationConfig,
    dataset: TrialDataset,
) -> set[str]:
    """Majority-vote symptom set over the windows inside the fault interval."""
    lo, hi = interval_windows(dataset.test.timestamps, dataset.fault.start_time, dataset.fault.end_time, model.window_len)
    _, flags = health_series(model, cfg, dataset.test.slice(lo, hi))
    return majority_symptoms(flags, model.signal_map.subsystems)


def run_trial(
    dataset: TrialDataset,
    theta: float = 0.9,
    w: CriterionWeights = EQUAL_WEIGHTS,
    settings: SymptomSettings = SymptomSettings(),
    index: int = 0,
) -> TrialOutcome:
    model = fit_linear_subspace_model(dataset.train, dataset.signal_map, settings.window_len, settings.latent_dim)
    cfg = calibrate_thresholds(
        model, dataset.calibration, BinarizationConfig.percentile(settings.percentile, settings.smoothing_window)
    )
    sym = fault_symptoms(model, cfg, dataset)
    h = HealthStateVector.from_symptoms(dataset.graph, sym)
    result = diagnose(dataset.graph, h, w, theta)
    s_true = dataset.fault.target
    return TrialOutcome(
        index=index,
        seed=dataset.seed,
        category=classify_outcome(s_true, sym, result.root_causes),
        s_true=s_true,
        s_sym=tuple(sorted(sym)),
        s_causal=tuple(sorted(result.root_causes)),
        n_nodes=len(dataset.graph),
        n_signals=len(dataset.signal_map.signals),
        fault_scale=dataset.fault.scale_factor,
    )


def trial_seeds(master_seed: int, n_trials: int) -> list[int]:
    children = np.random.SeedSequence(master_seed).spawn(n_trials)
    return [int(c.generate_state(1, dtype=np.uint32)[0]) for c in children]


@dataclass
class Experiment2Report:
    outcomes: list[TrialOutcome]
    failures: list[dict]
    theta: float
    weights: CriterionWeights
    master_seed: int

    @property
    def counts(self) -> dict[str, int]:
        c = {k: 0 for k in CATEGORIES}
        for o in self.outcomes:
            c[o.category] += 1
        return c

    @property
    def inclusion_rate(self) -> float:
        c = self.counts
        n = len(self.outcomes)
        return (c["no_reduction"] + c["reduced_set"] + c["perfect"]) / n if n else 0.0

    @property
    def reduction_rate(self) -> float:
        c = self.counts
        n = len(self.outcomes)
        return (c["reduced_set"] + c["perfect"]) / n if n else 0.0

    def summary(self) -> dict:
        n = len(self.outcomes)
        c = self.counts
        out: dict = dict(c)
        out["percentages"] = {k: (100.0 * v / n if n else 0.0) for k, v in c.items()}
        out["completed"] = n
        out["failed"] = len(self.failures)
        out["inclusion_rate"] = self.inclusion_rate
        out["reduction_rate"] = self.reduction_rate
        return out

    def to_dict(self) -> dict:
        return {
            "aggregate": self.summary(),
            "theta": self.theta,
            "weights": list(self.weights.as_tuple()),
            "master_seed": self.master_seed,
            "trials": [o.to_dict() for o in self.outcomes],
            "failures": self.failures,
        }


def run_experiment2(
    n_trials: int = 100,
    config: TrialConfig = TrialConfig(),
    theta: float = 0.9,
    w: CriterionWeights = EQUAL_WEIGHTS,
    seed: int = 0,
    settings: SymptomSettings = SymptomSettings(),
    workers: int = 1,
) -> Experiment2Report:
    """Run seeded simulated trials and classify each diagnosis outcome.

    A trial that raises is recorded under ``failures`` and left out of the
    category counts.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be positive")
    seeds = trial_seeds(seed, n_trials)

    def one(i: int):
        try:
            ds = make_trial(config, seeds[i])
            return run_trial(ds, theta, w, settings, index=i)
        except (ValueError, np.linalg.LinAlgError) as exc:
            return {"index": i, "seed": seeds[i], "error": f"{type(exc).__name__}: {exc}"}

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, range(n_trials)))
    else:
        results = [one(i) for i in range(n_trials)]
    outcomes = [r for r in results if isinstance(r, TrialOutcome)]
    failures = [r for r in results if isinstance(r, dict)]
    for f in failures:
        log.warning("trial %d failed: %s", f["index"], f["error"])
    return Experiment2Report(outcomes, failures, theta, w, seed)


@dataclass
class DetectionReport:
    """Per-trial detection of the faulted subsystem plus nominal false flags."""

    detected: list[bool]
    false_flag_rates: list[float]

    @property
    def detection_rate(self) -> float:
        return float(np.mean(self.detected)) if self.detected else 0.0

    @property
    def false_flag_rate(self) -> float:
        return float(np.mean(self.false_flag_rates)) if self.false_flag_rates else 0.0

    def to_dict(self) -> dict:
        return {
            "detection_rate": self.detection_rate,
            "false_flag_rate": self.false_flag_rate,
            "detected": self.detected,
            "false_flag_rates": self.false_flag_rates,
        }


def run_detection_study(
    n_trials: int = 50,
    config: TrialConfig = TrialConfig(),
    percentile: float = 99.0,
    seed: int = 0,
    settings: SymptomSettings = SymptomSettings(),
) -> DetectionReport:
    """Is the faulted subsystem a majority symptom, and how often do nominal windows trip?

    False flags are counted over every (window, subsystem) pair of the
    validation segment, which neither fitting nor calibration sees.
    """
    detected, ff = [], []
    for s in trial_seeds(seed, n_trials):
        ds = make_trial(config, s)
        model = fit_linear_subspace_model(ds.train, ds.signal_map, settings.window_len, settings.latent_dim)
        cfg = calibrate_thresholds(
            model, ds.calibration, BinarizationConfig.percentile(percentile, settings.smoothing_window)
        )
        detected.append(ds.fault.target in fault_symptoms(model, cfg, ds))
        _, flags = health_series(model, cfg, ds.validation)
        ff.append(float(flags.mean()))
    return DetectionReport(detected, ff)


# annotated real-world runs


@dataclass(frozen=True)
class AttackRow:
    attack: str
    attacked: tuple[str, ...]
    symptoms: tuple[str, ...]
    candidates: tuple[str, ...]


ATTACK_TABLE_COLUMNS = ("attack", "attacked_subsystems", "symptoms", "diagnosis_candidates")


def evaluate_attacks(
    run: AnnotatedRun,
    model: ResidualModel,
    cfg: BinarizationConfig,
    w: CriterionWeights,
    theta: float = 0.9,
) -> list[AttackRow]:
    """One row per annotated attack: majority-vote symptoms and their diagnosis.

    Residuals are computed over the whole telemetry so the moving median sees
    context around each attack.
    """
    subs = model.signal_map.subsystems
    R = model.subsystem_residuals(run.telemetry)
    flags = binarize(R, cfg, subs, model.window_len)
    ends = model.window_ends(run.telemetry)
    rows = []
    for win in run.windows:
        a = win.attack
        # windows that end inside the attack interval
        idx = [i for i, t in enumerate(ends) if a.start_time <= t <= a.end_time]
        sym = majority_symptoms(flags[idx], subs) if idx else set()
        if sym:
            roots = diagnose(run.graph, HealthStateVector.from_symptoms(run.graph, sym), w, theta).root_causes
        else:
            roots = frozenset()
        rows.append(AttackRow(a.attack_id, tuple(sorted(a.attacked_subsystems)), tuple(sorted(sym)), tuple(sorted(roots))))
    return rows


def attack_table_csv(rows: Sequence[AttackRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ATTACK_TABLE_COLUMNS)
    for r in rows:
        w.writerow([r.attack, " ".join(r.attacked), " ".join(r.symptoms) or "-", " ".join(r.candidates) or "-"])
    return buf.getvalue()


def descendant_symptoms(graph: CausalGraph, s_true: str, sym: Iterable[str]) -> set[str]:
    return set(sym) & reachable_set(graph, s_true)
