"""Subsystem-level residuals and their binarization into health states.

A residual model reconstructs windows of each subsystem's signals; the
per-signal residual is the window's mean squared reconstruction error and
the per-subsystem residual is the mean over the subsystem's signals.
Thresholds come from held-out nominal data.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal, Mapping, Sequence

import numpy as np

from .frames import FrameError, SubsystemSignalsMap, TimeSeriesFrame, sliding_windows
from .graph import HealthStateVector

DEFAULT_WINDOW = 32


class SymptomError(ValueError):
    pass


@dataclass(frozen=True)
class ResidualVector:
    per_signal: Mapping[str, float]
    per_subsystem: Mapping[str, float]
    timestamp: object


class ResidualModel:
    """Common machinery: window slicing and per-subsystem aggregation.

    Subclasses implement ``_reconstruct(sub, X)`` for a batch of flattened
    windows ``X`` of shape ``(n, window_len * n_signals)``.
    """

    kind = "abstract"

    def __init__(self, signal_map: SubsystemSignalsMap, window_len: int) -> None:
        self.signal_map = signal_map
        self.window_len = window_len

    def _reconstruct(self, sub: str, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def signal_residuals(self, frame: TimeSeriesFrame, stride: int = 1) -> np.ndarray:
        """Per-signal residuals, shape ``(n_windows, n_signals)`` in map order."""
        cols = []
        for sub, sig in self.signal_map.assignments.items():
            W = sliding_windows(frame.columns(sig), self.window_len, stride)
            X = W.reshape(W.shape[0], -1)
            err = (X - self._reconstruct(sub, X)) ** 2
            # flattened layout is (time, signal), so average over the time axis
            cols.append(err.reshape(W.shape).mean(axis=1))
        return np.concatenate(cols, axis=1) if cols else np.empty((0, 0))

    def subsystem_residuals(self, frame: TimeSeriesFrame, stride: int = 1) -> np.ndarray:
        """Per-subsystem residuals, shape ``(n_windows, n_subsystems)``."""
        return self.aggregate(self.signal_residuals(frame, stride))

    def aggregate(self, per_signal: np.ndarray) -> np.ndarray:
        out = []
        start = 0
        for sig in self.signal_map.assignments.values():
            out.append(per_signal[:, start : start + len(sig)].mean(axis=1))
            start += len(sig)
        return np.stack(out, axis=1)

    def window_ends(self, frame: TimeSeriesFrame, stride: int = 1) -> list:
        n = len(frame) - self.window_len + 1
        return [frame.timestamps[i + self.window_len - 1] for i in range(0, max(n, 0), stride)]

    def residuals(self, window: TimeSeriesFrame) -> ResidualVector:
        """Residuals of a single window of exactly ``window_len`` rows."""
        if len(window) != self.window_len:
            raise SymptomError(f"window has {len(window)} rows, model expects {self.window_len}")
        self.signal_map.check_signals(window.signal_names)
        per_sig = self.signal_residuals(window)[0]
        per_sub = self.aggregate(per_sig[None, :])[0]
        return ResidualVector(
            dict(zip(self.signal_map.signals, per_sig.tolist())),
            dict(zip(self.signal_map.subsystems, per_sub.tolist())),
            window.timestamps[-1],
        )

    # persistence

    def params(self) -> dict:
        raise NotImplementedError

    def save(self, path: str | Path) -> None:
        doc = {
            "kind": self.kind,
            "window_len": self.window_len,
            "map": self.signal_map.to_dict(),
            "params": self.params(),
        }
        Path(path).write_text(json.dumps(doc, sort_keys=True))

    @staticmethod
    def load(path: str | Path) -> ResidualModel:
        doc = json.loads(Path(path).read_text())
        smap = SubsystemSignalsMap.from_dict(doc["map"])
        cls = {"linear": LinearSubspaceModel, "autoencoder": AutoencoderModel}.get(doc.get("kind"))
        if cls is None:
            raise SymptomError(f"{path}: unknown model kind {doc.get('kind')!r}")
        return cls.from_params(smap, int(doc["window_len"]), doc["params"])


def _check_fit_inputs(nominal: TimeSeriesFrame, smap: SubsystemSignalsMap, window_len: int, latent: int) -> None:
    if window_len < 1:
        raise SymptomError("window_len must be positive")
    if latent < 1:
        raise SymptomError("latent_dim_per_subsystem must be positive")
    if len(nominal) < 10 * window_len:
        raise SymptomError(f"need at least {10 * window_len} nominal rows, got {len(nominal)}")
    try:
        smap.check_signals(nominal.signal_names)
    except FrameError as exc:
        raise SymptomError(str(exc)) from None
    narrow = min(len(sig) for sig in smap.assignments.values())
    if latent >= window_len * narrow:
        raise SymptomError(
            f"latent_dim_per_subsystem {latent} must be below window_len * smallest signal count ({window_len * narrow})"
        )


class LinearSubspaceModel(ResidualModel):
    """Per-subsystem principal subspace of flattened nominal windows."""

    kind = "linear"

    def __init__(self, signal_map, window_len, means, bases) -> None:
        super().__init__(signal_map, window_len)
        self.means: dict[str, np.ndarray] = means
        self.bases: dict[str, np.ndarray] = bases

    def _reconstruct(self, sub: str, X: np.ndarray) -> np.ndarray:
        mu = self.means[sub]
        V = self.bases[sub]
        return mu + ((X - mu) @ V.T) @ V

    def params(self) -> dict:
        return {
            "means": {s: m.tolist() for s, m in self.means.items()},
            "bases": {s: b.tolist() for s, b in self.bases.items()},
        }

    @classmethod
    def from_params(cls, smap, window_len, p) -> LinearSubspaceModel:
        means = {s: np.asarray(v, dtype=float) for s, v in p["means"].items()}
        bases = {s: np.asarray(v, dtype=float).reshape(-1, window_len * len(smap[s])) for s, v in p["bases"].items()}
        return cls(smap, window_len, means, bases)


def fit_linear_subspace_model(
    nominal: TimeSeriesFrame,
    signal_map: SubsystemSignalsMap,
    window_len: int = DEFAULT_WINDOW,
    latent_dim_per_subsystem: int = 4,
    stride: int = 1,
) -> LinearSubspaceModel:
    """Fit a rank-``k`` principal subspace per subsystem on sliding windows."""
    _check_fit_inputs(nominal, signal_map, window_len, latent_dim_per_subsystem)
    k = latent_dim_per_subsystem
    means, bases = {}, {}
    for sub, sig in signal_map.assignments.items():
        W = sliding_windows(nominal.columns(sig), window_len, stride)
        X = W.reshape(W.shape[0], -1)
        distinct = np.unique(X, axis=0).shape[0]
        if distinct < k:
            raise SymptomError(f"subsystem {sub!r}: only {distinct} distinct windows for latent dimension {k}")
        mu = X.mean(axis=0)
        # right singular vectors span the principal directions
        _, _, Vt = np.linalg.svd(X - mu, full_matrices=False)
        means[sub] = mu
        bases[sub] = Vt[:k]
    return LinearSubspaceModel(signal_map, window_len, means, bases)


class AutoencoderModel(ResidualModel):
    """One tanh hidden layer per subsystem; latent blocks form a composite code.

    Inputs are standardized per coordinate with training statistics.
    """

    kind = "autoencoder"

    def __init__(self, signal_map, window_len, nets) -> None:
        super().__init__(signal_map, window_len)
        self.nets: dict[str, dict[str, np.ndarray]] = nets

    def encode(self, sub: str, X: np.ndarray) -> np.ndarray:
        n = self.nets[sub]
        return np.tanh(((X - n["mu"]) / n["sd"]) @ n["W1"] + n["b1"])

    def _reconstruct(self, sub: str, X: np.ndarray) -> np.ndarray:
        n = self.nets[sub]
        Z = self.encode(sub, X)
        return (Z @ n["W2"] + n["b2"]) * n["sd"] + n["mu"]

    def latent(self, frame: TimeSeriesFrame, stride: int = 1) -> np.ndarray:
        """Concatenated per-subsystem codes, one row per window."""
        blocks = []
        for sub, sig in self.signal_map.assignments.items():
            W = sliding_windows(frame.columns(sig), self.window_len, stride)
            blocks.append(self.encode(sub, W.reshape(W.shape[0], -1)))
        return np.concatenate(blocks, axis=1)

    def params(self) -> dict:
        return {s: {k: v.tolist() for k, v in net.items()} for s, net in self.nets.items()}

    @classmethod
    def from_params(cls, smap, window_len, p) -> AutoencoderModel:
        nets = {s: {k: np.asarray(v, dtype=float) for k, v in net.items()} for s, net in p.items()}
        return cls(smap, window_len, nets)


def fit_autoencoder_model(
    nominal: TimeSeriesFrame,
    signal_map: SubsystemSignalsMap,
    window_len: int = DEFAULT_WINDOW,
    latent_dim_per_subsystem: int = 4,
    epochs: int = 300,
    learning_rate: float = 0.05,
    seed: int = 0,
    stride: int = 4,
) -> AutoencoderModel:
    """Train per-subsystem autoencoders by full-batch gradient descent on MSE."""
    _check_fit_inputs(nominal, signal_map, window_len, latent_dim_per_subsystem)
    if not isinstance(epochs, int) or epochs < 1:
        raise SymptomError(f"epochs must be a positive integer, got {epochs!r}")
    if not learning_rate > 0:
        raise SymptomError("learning_rate must be positive")
    rng = np.random.default_rng(seed)
    k = latent_dim_per_subsystem
    nets = {}
    for sub, sig in signal_map.assignments.items():
        W = sliding_windows(nominal.columns(sig), window_len, stride)
        X = W.reshape(W.shape[0], -1)
        mu = X.mean(axis=0)
        sd = X.std(axis=0)
        sd = np.where(sd > 1e-12, sd, 1.0)
        Xs = (X - mu) / sd
        n, d = Xs.shape
        W1 = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, k))
        b1 = np.zeros(k)
        W2 = rng.normal(0.0, 1.0 / math.sqrt(k), size=(k, d))
        b2 = np.zeros(d)
        for _ in range(epochs):
            Z = np.tanh(Xs @ W1 + b1)
            R = Z @ W2 + b2 - Xs
            # divergence is reported below, not as a numpy warning
            with np.errstate(over="ignore", invalid="ignore"):
                loss = float(np.mean(R**2))
            if not math.isfinite(loss):
                raise SymptomError(f"training diverged for {sub!r}; lower learning_rate (was {learning_rate})")
            G = 2.0 * R / (n * d)
            gW2 = Z.T @ G
            gb2 = G.sum(axis=0)
            GZ = (G @ W2.T) * (1.0 - Z**2)
            gW1 = Xs.T @ GZ
            gb1 = GZ.sum(axis=0)
            # gradients are scaled by d so the step size is independent of window width
            W1 -= learning_rate * d * gW1
            b1 -= learning_rate * d * gb1
            W2 -= learning_rate * d * gW2
            b2 -= learning_rate * d * gb2
        if not all(np.all(np.isfinite(a)) for a in (W1, b1, W2, b2)):
            raise SymptomError(f"training diverged for {sub!r}; lower learning_rate (was {learning_rate})")
        nets[sub] = {"mu": mu, "sd": sd, "W1": W1, "b1": b1, "W2": W2, "b2": b2}
    return AutoencoderModel(signal_map, window_len, nets)


# binarization


@dataclass(frozen=True)
class BinarizationConfig:
    """Threshold rule plus the per-subsystem thresholds once calibrated.

    ``method`` is ``"k_sigma"`` (mean + k standard deviations, ``param`` = k)
    or ``"percentile"`` (``param`` = q in (0, 100), linear interpolation).
    """

    method: Literal["k_sigma", "percentile"] = "percentile"
    param: float = 75.0
    smoothing_window: int = 0
    thresholds: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.method == "k_sigma":
            if not self.param > 0:
                raise SymptomError(f"k must be positive, got {self.param!r}")
        elif self.method == "percentile":
            if not 0 < self.param < 100:
                raise SymptomError(f"percentile must lie in (0, 100), got {self.param!r}")
        else:
            raise SymptomError(f"unknown threshold method {self.method!r}")
        if not isinstance(self.smoothing_window, int) or self.smoothing_window < 0:
            raise SymptomError("smoothing_window must be a non-negative integer")
        for s, v in self.thresholds.items():
            if not (math.isfinite(v) and v >= 0):
                raise SymptomError(f"threshold for {s!r} must be finite and non-negative, got {v!r}")

    @classmethod
    def mean_plus_k_sigma(cls, k: float = 2.0, smoothing_window: int = 0) -> BinarizationConfig:
        return cls("k_sigma", k, smoothing_window)

    @classmethod
    def percentile(cls, q: float = 75.0, smoothing_window: int = 0) -> BinarizationConfig:
        return cls("percentile", q, smoothing_window)

    @property
    def calibrated(self) -> bool:
        return bool(self.thresholds)

    def threshold_of(self, series: np.ndarray) -> float:
        if self.method == "k_sigma":
            return float(np.mean(series) + self.param * np.std(series))
        return float(np.percentile(series, self.param, method="linear"))

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "param": self.param,
            "smoothing_window": self.smoothing_window,
            "thresholds": dict(self.thresholds),
        }

    @classmethod
    def from_dict(cls, d: dict) -> BinarizationConfig:
        return cls(d["method"], float(d["param"]), int(d["smoothing_window"]), dict(d.get("thresholds", {})))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> BinarizationConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))


def moving_median(series: np.ndarray, width: int, step: int = 1) -> np.ndarray:
    """Centered moving median along axis 0 over ``width`` samples ``step`` apart.

    The window shrinks at the edges. ``step`` lets a stride-1 window series
    use the same time span as a median over non-overlapping windows.
    """
    if width <= 1:
        return np.array(series, dtype=float)
    if step < 1:
        raise SymptomError("step must be positive")
    x = np.asarray(series, dtype=float)
    n = x.shape[0]
    left = (width - 1) // 2 * step
    right = (width - 1) * step - left
    out = np.empty_like(x)
    for i in range(n):
        # first in-range sample on the same step grid as i
        lo = i - left if i >= left else i % step
        out[i] = np.median(x[lo : min(n, i + right + 1) : step], axis=0)
    return out


MIN_CALIBRATION_WINDOWS = 30


def calibrate_thresholds(
    model: ResidualModel,
    heldout_nominal: TimeSeriesFrame,
    cfg: BinarizationConfig,
) -> BinarizationConfig:
    """Set one threshold per subsystem from non-overlapping held-out windows.

    The held-out frame must not overlap the model's training data; that is
    not checked here.
    """
    R = model.subsystem_residuals(heldout_nominal, stride=model.window_len)
    if R.shape[0] < MIN_CALIBRATION_WINDOWS:
        raise SymptomError(
            f"calibration needs at least {MIN_CALIBRATION_WINDOWS} windows of {model.window_len} rows, got {R.shape[0]}"
        )
    R = moving_median(R, cfg.smoothing_window)
    thresholds = {s: max(cfg.threshold_of(R[:, j]), 0.0) for j, s in enumerate(model.signal_map.subsystems)}
    return replace(cfg, thresholds=thresholds)


def binarize(
    residuals: np.ndarray, cfg: BinarizationConfig, subsystems: Sequence[str], step: int = 1
) -> np.ndarray:
    """0/1 matrix: smoothed residual strictly above the subsystem's threshold.

    Pass ``step=window_len`` for stride-1 residuals so smoothing spans the
    same rows it did during calibration.
    """
    if not cfg.calibrated:
        raise SymptomError("binarization config has no thresholds; calibrate first")
    missing = [s for s in subsystems if s not in cfg.thresholds]
    if missing:
        raise SymptomError(f"no thresholds for subsystems {missing}")
    thr = np.array([cfg.thresholds[s] for s in subsystems])
    smoothed = moving_median(residuals, cfg.smoothing_window, step)
    return (smoothed > thr).astype(int)


def health_states(
    model: ResidualModel,
    cfg: BinarizationConfig,
    signal_map: SubsystemSignalsMap,
    window: TimeSeriesFrame,
) -> HealthStateVector:
    """Health states for one window; a lone window is its own median."""
    if not cfg.calibrated:
        raise SymptomError("binarization config has no thresholds; calibrate first")
    if set(signal_map.subsystems) != set(model.signal_map.subsystems):
        raise SymptomError("signal map does not match the model")
    try:
        rv = model.residuals(window)
    except FrameError as exc:
        raise SymptomError(str(exc)) from None
    subs = model.signal_map.subsystems
    flags = binarize(np.array([[rv.per_subsystem[s] for s in subs]]), cfg, subs)[0]
    return HealthStateVector(dict(zip(subs, flags.tolist())), rv.timestamp)


def health_series(
    model: ResidualModel,
    cfg: BinarizationConfig,
    frame: TimeSeriesFrame,
) -> tuple[list, np.ndarray]:
    """Window-end timestamps and 0/1 states for every stride-1 window of ``frame``."""
    R = model.subsystem_residuals(frame)
    return model.window_ends(frame), binarize(R, cfg, model.signal_map.subsystems, model.window_len)


def majority_symptoms(flags: np.ndarray, subsystems: Sequence[str]) -> set[str]:
    """Subsystems flagged in more than half of the given windows."""
    if flags.shape[0] == 0:
        return set()
    frac = flags.mean(axis=0)
    return {s for s, f in zip(subsystems, frac) if f > 0.5}
