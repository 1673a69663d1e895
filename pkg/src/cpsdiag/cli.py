"""Command-line entry point: ``cpsdiag <subcommand> ...``.

Exit codes: 0 on success, 2 when inputs or arguments fail validation,
1 when a computation fails after its inputs were accepted.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from collections import deque
from dataclasses import replace
from pathlib import Path
from typing import Iterator, TextIO

import numpy as np

from .diagnosis import EQUAL_WEIGHTS, CriterionWeights, diagnose
from .frames import FrameError, SubsystemSignalsMap, TimeSeriesFrame, parse_timestamp
from .graph import CausalGraph, HealthStateVector
from .harness import (
    DEFAULT_THETAS,
    SCENARIOS,
    SymptomSettings,
    attack_table_csv,
    evaluate_attacks,
    run_experiment2,
    theta_sweep,
)
from .ingest import DEFAULT_CODE_PATTERN, auto_map_signals, load_annotated_run, load_preset
from .simulator import TrialConfig, TrialDataset, make_trial
from .symptoms import (
    DEFAULT_WINDOW,
    BinarizationConfig,
    ResidualModel,
    binarize,
    calibrate_thresholds,
    fit_autoencoder_model,
    fit_linear_subspace_model,
    majority_symptoms,
)

log = logging.getLogger("cpsdiag")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_VALIDATION = 2


class ValidationError(Exception):
    """Bad arguments or unreadable inputs; maps to exit code 2."""


@contextlib.contextmanager
def validating(what: str = "") -> Iterator[None]:
    """Turn loader errors into ``ValidationError``."""
    try:
        yield
    except ValidationError:
        raise
    except (ValueError, KeyError, TypeError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        raise ValidationError(f"{what}: {msg}" if what else str(msg)) from None


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True)


def write_text(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


# input helpers


def _weights(args) -> CriterionWeights:
    if args.weights is not None:
        with validating("--weights"):
            return CriterionWeights.parse(args.weights)
    preset = getattr(args, "preset", None)
    if preset:
        return _preset(preset).weights
    return EQUAL_WEIGHTS


def _theta(args) -> float:
    if not 0.0 <= args.theta <= 1.0:
        raise ValidationError(f"--theta must lie in [0, 1], got {args.theta}")
    return args.theta


def _preset(name: str):
    with validating("--preset"):
        return load_preset(name)


def _graph(args) -> CausalGraph:
    if args.graph:
        with validating(args.graph):
            return CausalGraph.load(args.graph)
    if getattr(args, "preset", None):
        return _preset(args.preset).graph
    raise ValidationError("--graph is required (or --preset)")


def _model(path: str, window: int | None = None) -> ResidualModel:
    with validating(path):
        model = ResidualModel.load(path)
    if window is not None and window != model.window_len:
        raise ValidationError(f"--window {window} does not match the model's window length {model.window_len}")
    return model


def _thresholds(path: str, model: ResidualModel) -> BinarizationConfig:
    with validating(path):
        cfg = BinarizationConfig.load(path)
    if not cfg.calibrated:
        raise ValidationError(f"{path}: no thresholds; run calibrate first")
    missing = sorted(set(model.signal_map.subsystems) - set(cfg.thresholds))
    if missing:
        raise ValidationError(f"{path}: no thresholds for subsystems {missing}")
    return cfg


def _frame(path: str) -> TimeSeriesFrame:
    with validating(path):
        if path == "-":
            return TimeSeriesFrame.read_csv(sys.stdin)
        return TimeSeriesFrame.read_csv(path)


def _binarization(args) -> BinarizationConfig:
    with validating("threshold options"):
        if args.smooth < 0:
            raise ValueError("--smooth must be non-negative")
        if args.threshold_method == "k_sigma":
            return BinarizationConfig.mean_plus_k_sigma(args.k_sigma, args.smooth)
        return BinarizationConfig.percentile(args.percentile, args.smooth)


def read_health(path: str, graph: CausalGraph) -> HealthStateVector:
    """Health states from a file.

    Accepted: an empty file (no symptoms), a ``{"sub": 0|1}`` object, a
    ``{"t": ..., "h": {...}}`` record, an array of symptomatic names, or
    JSON lines of records (combined by majority vote). Nodes absent from
    the file are healthy.
    """
    with validating(path):
        text = Path(path).read_text()
    if not text.strip():
        return HealthStateVector.from_symptoms(graph, ())
    try:
        docs = [json.loads(text)]
    except json.JSONDecodeError:
        docs = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                docs.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}: line {lineno} column {exc.colno}: {exc.msg}") from None
    states = []
    for doc in docs:
        if isinstance(doc, list):
            if not all(isinstance(s, str) for s in doc):
                raise ValidationError(f"{path}: symptom array must hold node names")
            doc = {s: 1 for s in doc}
        if not isinstance(doc, dict):
            raise ValidationError(f"{path}: expected an object or array")
        h = doc["h"] if "h" in doc else doc
        if not isinstance(h, dict):
            raise ValidationError(f"{path}: 'h' must be an object")
        unknown = sorted(set(h) - set(graph.nodes))
        if unknown:
            raise ValidationError(f"{path}: unknown subsystems {unknown}")
        for k, v in h.items():
            if isinstance(v, bool) or v not in (0, 1):
                raise ValidationError(f"{path}: health state of {k!r} must be 0 or 1, got {v!r}")
        states.append([int(h.get(n, 0)) for n in graph.nodes])
    flags = np.array(states, dtype=int)
    sym = majority_symptoms(flags, graph.nodes)
    t = docs[-1].get("t", 0) if len(docs) == 1 and isinstance(docs[-1], dict) else 0
    return HealthStateVector.from_symptoms(graph, sym, t)


def _write_dot(path: str | None, graph: CausalGraph, sym, roots) -> None:
    if path:
        Path(path).write_text(graph.to_dot(sym, roots))


# subcommands


def cmd_simulate(args) -> int:
    if args.nodes is not None and not 2 <= args.nodes <= 200:
        raise ValidationError(f"--nodes must lie in [2, 200], got {args.nodes}")
    with validating("simulate options"):
        cfg = TrialConfig()
        if args.nodes is not None:
            cfg = replace(cfg, nodes=(args.nodes, args.nodes))
        if args.density is not None:
            cfg = replace(cfg, edge_density=(args.density, args.density))
        if args.acyclic:
            cfg = replace(cfg, allow_cycles=False)
        if args.fault_scale is not None:
            cfg = replace(cfg, fault_scale=(args.fault_scale, args.fault_scale))
    ds = make_trial(cfg, args.seed)
    out = ds.save(args.out)
    print(dumps({"out": str(out), "files": list(TrialDataset.FILES), "fault_target": ds.fault.target}))
    return EXIT_OK


def cmd_fit(args) -> int:
    with validating(args.map):
        smap = SubsystemSignalsMap.load(args.map)
    frame = _frame(args.train)
    with validating("fit"):
        smap.check_signals(frame.signal_names)
        if args.kind == "linear":
            model = fit_linear_subspace_model(frame, smap, args.window, args.latent)
        else:
            model = fit_autoencoder_model(frame, smap, args.window, args.latent, epochs=args.epochs, seed=args.seed)
    model.save(args.out)
    print(dumps({"kind": model.kind, "out": args.out, "window_len": model.window_len}))
    return EXIT_OK


def cmd_calibrate(args) -> int:
    model = _model(args.model, args.window)
    frame = _frame(args.heldout)
    with validating("calibrate"):
        model.signal_map.check_signals(frame.signal_names)
        cfg = calibrate_thresholds(model, frame, _binarization(args))
    cfg.save(args.out)
    print(dumps(cfg.to_dict()))
    return EXIT_OK


def _health_line(t, subs, flags) -> dict:
    stamp = t.isoformat() if hasattr(t, "isoformat") else t
    return {"t": stamp, "h": {s: int(f) for s, f in zip(subs, flags)}}


def cmd_detect(args) -> int:
    model = _model(args.model, args.window)
    cfg = _thresholds(args.thresholds, model)
    frame = _frame(args.telemetry)
    with validating(args.telemetry):
        model.signal_map.check_signals(frame.signal_names)
    subs = model.signal_map.subsystems
    flags = binarize(model.subsystem_residuals(frame), cfg, subs, model.window_len)
    lines = [dumps(_health_line(t, subs, f)) + "\n" for t, f in zip(model.window_ends(frame), flags.tolist())]
    write_text(args.out, "".join(lines))
    return EXIT_OK


def cmd_diagnose(args) -> int:
    g = _graph(args)
    h = read_health(args.health, g)
    result = diagnose(g, h, _weights(args), _theta(args))
    print(dumps(result.to_dict()))
    _write_dot(args.dot, g, h.symptomatic, result.root_causes)
    return EXIT_OK


class StreamError(Exception):
    """Malformed telemetry row in the middle of a stream."""


def _stream_rows(src: TextIO, names: list[str]) -> Iterator[tuple[object, np.ndarray]]:
    reader = csv.reader(src)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise ValidationError("telemetry stream is empty") from None
    if not header or header[0] != "timestamp":
        raise ValidationError("line 1: first column must be 'timestamp'")
    index = {n: i for i, n in enumerate(header)}
    missing = [n for n in names if n not in index]
    if missing:
        raise ValidationError(f"telemetry lacks signals {missing}")
    cols = [index[n] for n in names]
    prev = None
    for lineno, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != len(header):
            raise StreamError(f"line {lineno}: expected {len(header)} fields, got {len(rec)}")
        try:
            t = parse_timestamp(rec[0])
            row = np.array([float(rec[c]) for c in cols])
        except (ValueError, FrameError) as exc:
            raise StreamError(f"line {lineno}: {exc}") from None
        if not np.all(np.isfinite(row)):
            raise StreamError(f"line {lineno}: non-finite value")
        if prev is not None and not prev < t:
            raise StreamError(f"line {lineno}: timestamps must increase")
        prev = t
        yield t, row


def _trailing_median(history: deque, width: int, step: int) -> np.ndarray:
    # the newest residual and the width-1 before it, step emitted windows apart
    return np.median(np.array(history)[::-1][: (width - 1) * step + 1 : step], axis=0) if width > 1 else history[-1]


def cmd_pipeline(args) -> int:
    """Stream telemetry through detection and diagnosis, one window at a time.

    Smoothing in a stream can only look back, so a trailing moving median of
    the calibrated width replaces the centered one. Its samples are one
    window length apart, as in calibration.
    """
    model = _model(args.model, args.window)
    cfg = _thresholds(args.thresholds, model)
    g = _graph(args)
    with validating(args.graph or "graph"):
        model.signal_map.check_graph(g)
    w = _weights(args)
    theta = _theta(args)
    if args.stride < 1:
        raise ValidationError("--stride must be positive")
    W = model.window_len
    subs = model.signal_map.subsystems
    names = model.signal_map.signals
    src = sys.stdin if args.telemetry == "-" else open(args.telemetry, newline="")
    buf: deque = deque(maxlen=W)
    # emitted windows per calibration window, so the median spans the same rows
    step = max(1, W // args.stride)
    history: deque = deque(maxlen=max(cfg.smoothing_window - 1, 0) * step + 1)
    stats = {"windows": 0, "diagnosed": 0, "rows": 0, "dropped_short_windows": 0}
    incident: list = []
    out = sys.stdout

    def emit(obj) -> None:
        out.write(dumps(obj) + "\n")

    def close_incident() -> None:
        if not incident:
            return
        flags = np.array([f for _, f in incident])
        sym = majority_symptoms(flags, subs)
        rec = {"start": incident[0][0], "end": incident[-1][0], "windows": len(incident), "symptoms": sorted(sym)}
        if sym:
            res = diagnose(g, HealthStateVector.from_symptoms(g, sym), w, theta)
            rec["diagnosis"] = res.to_dict()
            stats["diagnosed"] += 1
        emit({"incident": rec})
        stats.setdefault("incidents", 0)
        stats["incidents"] += 1
        incident.clear()

    since_last = 0
    error = None
    try:
        for t, row in _stream_rows(src, names):
            buf.append(row)
            stats["rows"] += 1
            since_last += 1
            if len(buf) < W or (stats["windows"] and since_last < args.stride):
                continue
            since_last = 0
            frame = TimeSeriesFrame(range(W), names, np.array(buf))
            history.append(model.subsystem_residuals(frame)[0])
            r = _trailing_median(history, cfg.smoothing_window, step)
            flags = binarize(r[None, :], replace(cfg, smoothing_window=0), subs)[0]
            line = _health_line(t, subs, flags.tolist())
            stats["windows"] += 1
            if args.group_incidents:
                if flags.any():
                    incident.append((line["t"], flags))
                else:
                    close_incident()
                continue
            if flags.any():
                h = HealthStateVector(line["h"], t)
                line["diagnosis"] = diagnose(g, h, w, theta).to_dict()
                stats["diagnosed"] += 1
            emit(line)
    except StreamError as exc:
        error = str(exc)
    finally:
        if src is not sys.stdin:
            src.close()
    close_incident()
    # rows after the last full window, or a stream shorter than one window
    if (stats["windows"] == 0 and stats["rows"] > 0) or (since_last > 0 and stats["windows"] > 0):
        stats["dropped_short_windows"] = 1
        log.warning("dropped a trailing window shorter than %d rows", W)
    if error:
        stats["error"] = error
    emit({"summary": stats})
    out.flush()
    if error:
        log.error("%s", error)
        return EXIT_RUNTIME
    return EXIT_OK


def _parse_thetas(text: str | None) -> tuple[float, ...]:
    if text is None:
        return DEFAULT_THETAS
    with validating("--thetas"):
        return tuple(float(x) for x in text.split(","))


def cmd_sweep(args) -> int:
    if args.scenario:
        if args.scenario not in SCENARIOS:
            raise ValidationError(f"unknown scenario {args.scenario!r}; choose from {sorted(SCENARIOS)}")
        sc = SCENARIOS[args.scenario]
        g, h = sc.graph, sc.health
    else:
        if not args.health:
            raise ValidationError("--health is required unless --scenario is given")
        g = _graph(args)
        h = read_health(args.health, g)
    with validating("sweep"):
        report = theta_sweep(g, h, _weights(args), _parse_thetas(args.thetas))
    if args.out:
        Path(args.out).write_text(report.to_csv())
    print(dumps(report.to_dict()))
    return EXIT_OK


def cmd_exp1(args) -> int:
    w = _weights(args)
    out = {}
    for name, sc in sorted(SCENARIOS.items()):
        report = theta_sweep(sc.graph, sc.health, w, _parse_thetas(args.thetas))
        at_one = diagnose(sc.graph, sc.health, w, 1.0)
        out[name] = {
            "description": sc.description,
            "symptoms": sorted(sc.symptoms),
            "theta_1": at_one.to_dict(),
            "sweep": report.to_dict(),
        }
        if args.out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            (Path(args.out) / f"{name}.csv").write_text(report.to_csv())
            (Path(args.out) / f"{name}.dot").write_text(sc.graph.to_dot(sc.symptoms, at_one.root_causes))
    print(dumps(out))
    return EXIT_OK


def cmd_exp2(args) -> int:
    if args.trials < 1:
        raise ValidationError("--trials must be positive")
    if args.workers < 1:
        raise ValidationError("--workers must be positive")
    with validating("exp2 options"):
        cfg = TrialConfig()
        if args.nodes:
            lo, hi = (int(x) for x in args.nodes.split(","))
            cfg = replace(cfg, nodes=(lo, hi))
        settings = SymptomSettings(args.window, args.latent, args.percentile, args.smooth)
    report = run_experiment2(args.trials, cfg, _theta(args), _weights(args), args.seed, settings, args.workers)
    if args.out:
        Path(args.out).write_text(dumps(report.to_dict()) + "\n")
    print(dumps(report.summary()))
    return EXIT_OK


def cmd_ingest(args) -> int:
    frame = _frame(args.telemetry)
    if args.map:
        with validating(args.map):
            smap = SubsystemSignalsMap.load(args.map)
            smap.check_signals(frame.signal_names)
    else:
        with validating("auto map"):
            smap = auto_map_signals(frame.signal_names, args.pattern)
    if not args.attacks:
        write_text(args.out, json.dumps(smap.to_dict(), indent=2, sort_keys=True) + "\n")
        return EXIT_OK
    if not (args.model and args.thresholds):
        raise ValidationError("--attacks needs --model and --thresholds")
    g = _graph(args)
    model = _model(args.model, args.window)
    cfg = _thresholds(args.thresholds, model)
    with validating("ingest"):
        run = load_annotated_run(args.telemetry, args.attacks, smap, g)
    rows = evaluate_attacks(run, model, cfg, _weights(args), _theta(args))
    write_text(args.out, attack_table_csv(rows))
    return EXIT_OK


# parser


def _add_diag_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--graph", help="causal graph JSON")
    p.add_argument("--preset", choices=["swat"], help="bundled graph and weights")
    p.add_argument("--theta", type=float, default=0.9, help="relative selection threshold (default 0.9)")
    p.add_argument("--weights", help="w1,w2,w3,w4 for reach,dist,anom,chain (default equal)")


def _add_threshold_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--threshold-method", choices=["percentile", "k_sigma"], default="percentile")
    p.add_argument("--percentile", type=float, default=75.0)
    p.add_argument("--k-sigma", type=float, default=2.0)
    p.add_argument("--smooth", type=int, default=0, help="moving-median width over windows (0 = off)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cpsdiag", description="Subsystem-level root-cause diagnosis for CPS telemetry.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic trial dataset directory")
    p.add_argument("--nodes", type=int)
    p.add_argument("--density", type=float)
    p.add_argument("--acyclic", action="store_true")
    p.add_argument("--fault-scale", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit a residual model on nominal telemetry")
    p.add_argument("--train", required=True)
    p.add_argument("--map", required=True)
    p.add_argument("--kind", choices=["linear", "autoencoder"], default="linear")
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    p.add_argument("--latent", type=int, default=4, help="latent dimension per subsystem")
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("calibrate", help="calibrate thresholds on held-out nominal telemetry")
    p.add_argument("--model", required=True)
    p.add_argument("--heldout", required=True)
    p.add_argument("--window", type=int)
    _add_threshold_opts(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("detect", help="health states for every window, as JSON lines")
    p.add_argument("--model", required=True)
    p.add_argument("--thresholds", required=True)
    p.add_argument("--telemetry", required=True, help="CSV path or - for stdin")
    p.add_argument("--window", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("diagnose", help="root causes for one health-state vector")
    _add_diag_opts(p)
    p.add_argument("--health", required=True)
    p.add_argument("--dot", help="also write the annotated graph as DOT")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("pipeline", help="stream telemetry through detection and diagnosis")
    _add_diag_opts(p)
    p.add_argument("--model", required=True)
    p.add_argument("--thresholds", required=True)
    p.add_argument("--telemetry", default="-", help="CSV path or - for stdin (default)")
    p.add_argument("--window", type=int)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--group-incidents", action="store_true", help="merge consecutive symptomatic windows")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("sweep", help="diagnose over a descending theta grid")
    _add_diag_opts(p)
    p.add_argument("--health")
    p.add_argument("--scenario", help="one of the canonical scenarios instead of --graph/--health")
    p.add_argument("--thetas", help="comma-separated, strictly descending")
    p.add_argument("--out", help="CSV table path")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("exp1", help="theta sweeps on the canonical scenarios")
    p.add_argument("--weights")
    p.add_argument("--thetas")
    p.add_argument("--out", help="directory for per-scenario CSV and DOT files")
    p.set_defaults(func=cmd_exp1)

    p = sub.add_parser("exp2", help="seeded simulated trial study")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--nodes", help="lo,hi node range")
    p.add_argument("--theta", type=float, default=0.9)
    p.add_argument("--weights")
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    p.add_argument("--latent", type=int, default=4)
    p.add_argument("--percentile", type=float, default=75.0)
    p.add_argument("--smooth", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="full JSON report path")
    p.set_defaults(func=cmd_exp2)

    p = sub.add_parser("ingest", help="auto-map stage-coded signals; with --attacks, emit the evaluation table")
    _add_diag_opts(p)
    p.add_argument("--telemetry", required=True)
    p.add_argument("--map")
    p.add_argument("--pattern", default=DEFAULT_CODE_PATTERN)
    p.add_argument("--attacks")
    p.add_argument("--model")
    p.add_argument("--thresholds")
    p.add_argument("--window", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ingest)
    return ap


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("CPSDIAG_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_VALIDATION
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
