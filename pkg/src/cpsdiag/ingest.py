"""Loading water-treatment style datasets: stage-coded signals and attack logs."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from datetime import datetime
from importlib import resources
from pathlib import Path
from typing import Sequence

from .diagnosis import CriterionWeights
from .frames import SubsystemSignalsMap, TimeSeriesFrame
from .graph import CausalGraph

# first digit of the first three-digit run, e.g. FIT101 -> stage 1
DEFAULT_CODE_PATTERN = r"(?<!\d)(\d)\d\d(?!\d)"


class IngestError(ValueError):
    pass


def auto_map_signals(
    signal_names: Sequence[str],
    pattern: str = DEFAULT_CODE_PATTERN,
    template: str = "P{}",
) -> SubsystemSignalsMap:
    """Group signals by the stage code in their names.

    ``pattern`` must capture the stage in its first group; ``template``
    turns the captured code into a subsystem name.
    """
    rx = re.compile(pattern)
    groups: dict[str, list[str]] = {}
    bad = []
    for name in signal_names:
        m = rx.search(name)
        if m is None:
            bad.append(name)
            continue
        groups.setdefault(template.format(m.group(1)), []).append(name)
    if bad:
        raise IngestError(f"signal names without a stage code: {bad}")
    ordered = sorted(groups, key=lambda s: (len(s), s))
    return SubsystemSignalsMap({s: groups[s] for s in ordered})


@dataclass(frozen=True)
class AttackAnnotation:
    attack_id: str
    attacked_subsystems: frozenset[str]
    start_time: object
    end_time: object

    def __post_init__(self) -> None:
        if not self.attacked_subsystems:
            raise IngestError(f"attack {self.attack_id!r} lists no subsystems")
        if not self.start_time < self.end_time:
            raise IngestError(f"attack {self.attack_id!r}: start must precede end")


@dataclass(frozen=True)
class EvaluationWindow:
    attack: AttackAnnotation
    frame: TimeSeriesFrame


@dataclass(frozen=True)
class AnnotatedRun:
    telemetry: TimeSeriesFrame
    signal_map: SubsystemSignalsMap
    graph: CausalGraph
    windows: tuple[EvaluationWindow, ...]


def _coerce_time(value, like, where: str):
    if isinstance(like, datetime):
        if not isinstance(value, str):
            raise IngestError(f"{where}: expected an ISO-8601 timestamp, got {value!r}")
        try:
            return datetime.fromisoformat(value)
        except ValueError:
            raise IngestError(f"{where}: invalid ISO-8601 timestamp {value!r}") from None
    if isinstance(value, bool) or not isinstance(value, int):
        raise IngestError(f"{where}: expected an integer time index, got {value!r}")
    return value


def parse_attacks(doc: object, telemetry: TimeSeriesFrame, graph: CausalGraph) -> list[AttackAnnotation]:
    if not isinstance(doc, list):
        raise IngestError("attacks document must be a JSON array")
    if not len(telemetry):
        raise IngestError("telemetry is empty")
    first, last = telemetry.timestamps[0], telemetry.timestamps[-1]
    out = []
    for i, rec in enumerate(doc):
        where = f"attacks[{i}]"
        if not isinstance(rec, dict):
            raise IngestError(f"{where}: must be an object")
        missing = {"id", "subsystems", "start", "end"} - set(rec)
        if missing:
            raise IngestError(f"{where}: missing fields {sorted(missing)}")
        extra = set(rec) - {"id", "subsystems", "start", "end"}
        if extra:
            raise IngestError(f"{where}: unknown fields {sorted(extra)}")
        subs = rec["subsystems"]
        if not isinstance(subs, list) or not all(isinstance(s, str) for s in subs):
            raise IngestError(f"{where}.subsystems: must be an array of strings")
        for s in subs:
            if s not in graph:
                raise IngestError(f"{where}.subsystems: {s!r} is not a node of the graph")
        start = _coerce_time(rec["start"], first, f"{where}.start")
        end = _coerce_time(rec["end"], first, f"{where}.end")
        if start < first or end > last:
            raise IngestError(f"{where}: interval [{rec['start']}, {rec['end']}] lies outside the telemetry range")
        try:
            out.append(AttackAnnotation(str(rec["id"]), frozenset(subs), start, end))
        except IngestError as exc:
            raise IngestError(f"{where}: {exc}") from None
    return out


def load_annotated_run(
    telemetry_csv: str | Path,
    attacks_json: str | Path,
    signal_map: SubsystemSignalsMap,
    graph: CausalGraph,
) -> AnnotatedRun:
    """Telemetry plus one evaluation window per annotated attack."""
    signal_map.check_graph(graph)
    frame = TimeSeriesFrame.read_csv(telemetry_csv)
    signal_map.check_signals(frame.signal_names)
    try:
        doc = json.loads(Path(attacks_json).read_text())
    except json.JSONDecodeError as exc:
        raise IngestError(f"{attacks_json}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    attacks = parse_attacks(doc, frame, graph)
    windows = []
    for att in attacks:
        rows = [i for i, t in enumerate(frame.timestamps) if att.start_time <= t <= att.end_time]
        windows.append(EvaluationWindow(att, frame.slice(rows[0], rows[-1] + 1)))
    return AnnotatedRun(frame, signal_map, graph, tuple(windows))


@dataclass(frozen=True)
class Preset:
    """Bundled configuration: graph, criterion weights and threshold rule."""

    name: str
    graph: CausalGraph
    weights: CriterionWeights
    threshold_method: str
    threshold_param: float
    smoothing_window: int
    uncertain_edges: tuple[tuple[str, str], ...]


def load_preset(name: str) -> Preset:
    if name != "swat":
        raise IngestError(f"unknown preset {name!r}; available: swat")
    doc = json.loads(resources.files("cpsdiag.data").joinpath("swat.json").read_text())
    return Preset(
        name=name,
        graph=CausalGraph.from_dict(doc["graph"]),
        weights=CriterionWeights(*doc["weights"]),
        threshold_method="percentile",
        threshold_param=float(doc["percentile"]),
        smoothing_window=int(doc["smoothing_window"]),
        uncertain_edges=tuple(tuple(e) for e in doc["uncertain_edges"]),
    )
