"""Telemetry frames and subsystem-signal maps, with their CSV/JSON formats."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Iterable, Mapping, Sequence, TextIO

import numpy as np

from .graph import CausalGraph


class FrameError(ValueError):
    pass


@dataclass(frozen=True)
class SubsystemSignalsMap:
    """Partition of the signal set into per-subsystem groups."""

    assignments: Mapping[str, tuple[str, ...]]

    def __init__(self, assignments: Mapping[str, Iterable[str]]) -> None:
        clean: dict[str, tuple[str, ...]] = {}
        owner: dict[str, str] = {}
        for sub, signals in assignments.items():
            sig = tuple(signals)
            if not sig:
                raise FrameError(f"subsystem {sub!r} has no signals")
            if len(set(sig)) != len(sig):
                raise FrameError(f"subsystem {sub!r} lists a signal twice")
            for p in sig:
                if p in owner:
                    raise FrameError(f"signal {p!r} assigned to both {owner[p]!r} and {sub!r}")
                owner[p] = sub
            clean[sub] = sig
        object.__setattr__(self, "assignments", clean)

    @property
    def subsystems(self) -> list[str]:
        return list(self.assignments)

    @property
    def signals(self) -> list[str]:
        return [p for sig in self.assignments.values() for p in sig]

    def __getitem__(self, sub: str) -> tuple[str, ...]:
        return self.assignments[sub]

    def owner_of(self) -> dict[str, str]:
        return {p: s for s, sig in self.assignments.items() for p in sig}

    def check_graph(self, g: CausalGraph) -> None:
        if set(self.assignments) != set(g.nodes):
            missing = sorted(set(g.nodes) - set(self.assignments))
            extra = sorted(set(self.assignments) - set(g.nodes))
            raise FrameError(f"signal map does not cover graph (missing {missing}, unknown {extra})")

    def check_signals(self, names: Sequence[str]) -> None:
        if set(names) != set(self.signals) or len(names) != len(self.signals):
            missing = sorted(set(self.signals) - set(names))
            extra = sorted(set(names) - set(self.signals))
            raise FrameError(f"signals do not match the map (missing {missing}, unmapped {extra})")

    def to_dict(self) -> dict:
        return {s: list(sig) for s, sig in self.assignments.items()}

    @classmethod
    def from_dict(cls, data: object) -> SubsystemSignalsMap:
        if not isinstance(data, dict):
            raise FrameError("signal map must be a JSON object")
        for k, v in data.items():
            if not isinstance(v, list) or not all(isinstance(p, str) for p in v):
                raise FrameError(f"signals of {k!r} must be an array of strings")
        return cls(data)

    @classmethod
    def load(cls, path: str | Path) -> SubsystemSignalsMap:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise FrameError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
        return cls.from_dict(data)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def parse_timestamp(text: str):
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return datetime.fromisoformat(text.strip())
    except ValueError:
        raise FrameError(f"timestamp {text!r} is neither an integer nor ISO-8601") from None


@dataclass(frozen=True)
class TimeSeriesFrame:
    """Rows are time steps, columns are signals."""

    timestamps: tuple
    signal_names: tuple[str, ...]
    values: np.ndarray

    def __init__(self, timestamps: Iterable, signal_names: Iterable[str], values) -> None:
        ts = tuple(timestamps)
        names = tuple(signal_names)
        vals = np.array(values, dtype=float)
        if vals.ndim != 2:
            raise FrameError(f"values must be a 2-D matrix, got shape {vals.shape}")
        if vals.shape != (len(ts), len(names)):
            raise FrameError(f"values shape {vals.shape} does not match {len(ts)} timestamps x {len(names)} signals")
        if len(set(names)) != len(names):
            raise FrameError("duplicate signal names")
        if not np.all(np.isfinite(vals)):
            raise FrameError("values contain non-finite entries")
        for i in range(1, len(ts)):
            if not ts[i - 1] < ts[i]:
                raise FrameError(f"timestamps not strictly increasing at row {i}")
        vals.setflags(write=False)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "signal_names", names)
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return len(self.timestamps)

    def columns(self, names: Sequence[str]) -> np.ndarray:
        index = {n: i for i, n in enumerate(self.signal_names)}
        try:
            return self.values[:, [index[n] for n in names]]
        except KeyError as exc:
            raise FrameError(f"unknown signal {exc.args[0]!r}") from None

    def slice(self, start: int, stop: int) -> TimeSeriesFrame:
        return TimeSeriesFrame(self.timestamps[start:stop], self.signal_names, self.values[start:stop])

    def write_csv(self, out: str | Path | TextIO) -> None:
        if isinstance(out, (str, Path)):
            with open(out, "w", newline="") as fh:
                self.write_csv(fh)
            return
        w = csv.writer(out, lineterminator="\n")
        w.writerow(("timestamp",) + self.signal_names)
        for t, row in zip(self.timestamps, self.values.tolist()):
            stamp = t.isoformat() if isinstance(t, datetime) else str(t)
            # repr round-trips binary64 exactly
            w.writerow([stamp] + [repr(v) for v in row])

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        self.write_csv(buf)
        return buf.getvalue()

    @classmethod
    def read_csv(cls, src: str | Path | TextIO) -> TimeSeriesFrame:
        if isinstance(src, (str, Path)):
            with open(src, newline="") as fh:
                return cls.read_csv(fh)
        reader = csv.reader(src)
        try:
            header = next(reader)
        except StopIteration:
            raise FrameError("telemetry CSV is empty") from None
        if not header or header[0].strip() != "timestamp":
            raise FrameError("line 1: first column must be 'timestamp'")
        names = [h.strip() for h in header[1:]]
        stamps = []
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise FrameError(f"line {lineno}: expected {len(header)} fields, got {len(rec)}")
            try:
                stamps.append(parse_timestamp(rec[0]))
                rows.append([float(x) for x in rec[1:]])
            except (ValueError, FrameError) as exc:
                raise FrameError(f"line {lineno}: {exc}") from None
        vals = np.array(rows, dtype=float).reshape(len(rows), len(names))
        try:
            return cls(stamps, names, vals)
        except FrameError as exc:
            raise FrameError(f"telemetry CSV: {exc}") from None


def sliding_windows(values: np.ndarray, window_len: int, stride: int = 1) -> np.ndarray:
    """Stack of ``(n_windows, window_len, n_cols)`` views."""
    n = values.shape[0]
    if n < window_len:
        return np.empty((0, window_len, values.shape[1]))
    view = np.lib.stride_tricks.sliding_window_view(values, window_len, axis=0)
    # sliding_window_view puts the window axis last
    return np.moveaxis(view[::stride], -1, 1)


