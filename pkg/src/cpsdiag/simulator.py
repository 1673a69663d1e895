"""Synthetic fault-injection benchmarks from random block-structured LTI plants.

A random causal graph fixes which state blocks may couple: an edge ``l -> m``
lets the states of ``l`` drive the derivative of the states of ``m``. The
plant ``dy/dt = A y + B u`` is driven by random step inputs and integrated
with fixed-step RK4; faults multiply entries of one subsystem's diagonal
block of ``A`` for a time interval.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Tuple, Union

import numpy as np

from .frames import SubsystemSignalsMap, TimeSeriesFrame
from .graph import CausalGraph


class SimulationError(ValueError):
    pass


def node_names(n: int) -> list[str]:
    width = len(str(n - 1))
    return [f"S{i:0{width}d}" for i in range(n)]


def sample_graph(
    n_nodes: int,
    edge_density: float,
    allow_cycles: bool = True,
    seed: int | None = None,
) -> CausalGraph:
    """Weakly connected random digraph with ``ceil(density * n * (n-1))`` edges.

    A random spanning tree guarantees connectivity; the remaining edges are
    drawn without replacement from the admissible pairs. Without cycles every
    edge follows a random topological order.
    """
    if not isinstance(n_nodes, (int, np.integer)) or not 2 <= n_nodes <= 200:
        raise SimulationError(f"n_nodes must be an integer in [2, 200], got {n_nodes!r}")
    if not 0.0 < edge_density <= 1.0:
        raise SimulationError(f"edge_density must lie in (0, 1], got {edge_density!r}")
    n = int(n_nodes)
    pairs_total = n * (n - 1)
    target = math.ceil(edge_density * pairs_total)
    if not allow_cycles:
        pairs_total //= 2
    if target < n - 1:
        raise SimulationError(
            f"edge_density {edge_density} gives {target} edges; a connected graph on {n} nodes "
            f"needs at least {n - 1} (density >= {(n - 1) / (n * (n - 1)):.4g})"
        )
    target = min(target, pairs_total)

    rng = np.random.default_rng(seed)
    names = node_names(n)
    order = rng.permutation(n)
    rank = np.empty(n, dtype=int)
    rank[order] = np.arange(n)

    def orient(a: int, b: int) -> tuple[int, int]:
        if allow_cycles:
            return (a, b) if rng.random() < 0.5 else (b, a)
        return (a, b) if rank[a] < rank[b] else (b, a)

    edges: set[tuple[int, int]] = set()
    # random recursive tree over a random node order
    for i in range(1, n):
        a = int(order[i])
        b = int(order[rng.integers(0, i)])
        edges.add(orient(a, b))

    if allow_cycles:
        pool = [(a, b) for a in range(n) for b in range(n) if a != b and (a, b) not in edges]
    else:
        pool = [(a, b) for a in range(n) for b in range(n) if rank[a] < rank[b] and (a, b) not in edges]
    extra = target - len(edges)
    if extra > 0:
        pick = rng.choice(len(pool), size=extra, replace=False)
        edges.update(pool[i] for i in sorted(pick))
    return CausalGraph(names, [(names[a], names[b]) for a, b in edges])


@dataclass(frozen=True)
class LtiSystem:
    A: np.ndarray
    B: np.ndarray
    blocks: dict[str, tuple[int, int]]
    noise_std: float = 0.0
    # y0 defaults to the steady state under the mean control level
    y0: np.ndarray | None = None

    @property
    def n_states(self) -> int:
        return self.A.shape[0]

    def signal_map(self) -> SubsystemSignalsMap:
        return SubsystemSignalsMap({s: signal_names(s, hi - lo) for s, (lo, hi) in self.blocks.items()})

    def block(self, row: str, col: str) -> np.ndarray:
        r0, r1 = self.blocks[row]
        c0, c1 = self.blocks[col]
        return self.A[r0:r1, c0:c1]


def signal_names(sub: str, count: int) -> list[str]:
    return [f"{sub}_y{j}" for j in range(count)]


def spectral_abscissa(M: np.ndarray) -> float:
    return float(np.max(np.linalg.eigvals(M).real)) if M.size else 0.0


def build_system(
    g: CausalGraph,
    signals_per_node: tuple[int, int] = (2, 5),
    coupling_scale: float = 1.0,
    damping: float = 1.0,
    noise_std: float = 0.0,
    seed: int | None = None,
    n_inputs: int | None = None,
) -> LtiSystem:
    """Random plant whose off-diagonal coupling pattern follows ``g``.

    Every entry of a permitted block is uniform in ``[-coupling_scale,
    coupling_scale]``; ``A`` is then shifted by ``-(damping + rho) I`` with
    ``rho`` the spectral abscissa of the raw matrix, so every eigenvalue has
    real part ``<= -damping``. With ``n_inputs=None`` each subsystem has its
    own control input; otherwise ``n_inputs`` shared inputs drive every state.
    """
    lo_n, hi_n = signals_per_node
    if not 1 <= lo_n <= hi_n:
        raise SimulationError(f"invalid signals_per_node range {signals_per_node!r}")
    if coupling_scale <= 0 or damping <= 0 or noise_std < 0:
        raise SimulationError("coupling_scale and damping must be positive, noise_std non-negative")

    rng = np.random.default_rng(seed)
    sizes = rng.integers(lo_n, hi_n + 1, size=len(g.nodes))
    blocks: dict[str, tuple[int, int]] = {}
    start = 0
    for name, k in zip(g.nodes, sizes):
        blocks[name] = (start, start + int(k))
        start += int(k)
    n = start

    A = np.zeros((n, n))
    for name in g.nodes:
        a0, a1 = blocks[name]
        A[a0:a1, a0:a1] = rng.uniform(-coupling_scale, coupling_scale, size=(a1 - a0, a1 - a0))
    for src, dst in sorted(g.edges):
        s0, s1 = blocks[src]
        d0, d1 = blocks[dst]
        A[d0:d1, s0:s1] = rng.uniform(-coupling_scale, coupling_scale, size=(d1 - d0, s1 - s0))
    rho = spectral_abscissa(A)
    A -= (damping + rho) * np.eye(n)

    if n_inputs is None:
        B = np.zeros((n, len(g.nodes)))
        for j, name in enumerate(g.nodes):
            b0, b1 = blocks[name]
            B[b0:b1, j] = rng.uniform(0.5, 1.5, size=b1 - b0) * rng.choice([-1.0, 1.0], size=b1 - b0)
    else:
        if n_inputs < 1:
            raise SimulationError("n_inputs must be positive")
        B = rng.uniform(0.5, 1.5, size=(n, n_inputs)) * rng.choice([-1.0, 1.0], size=(n, n_inputs))
    return LtiSystem(A, B, blocks, float(noise_std))


@dataclass(frozen=True)
class ControlPolicy:
    """Piecewise-constant inputs with i.i.d. normal levels redrawn every ``hold`` steps."""

    hold: int = 25
    mean: float = 1.0
    std: float = 0.5


EntryRule = Union[Literal["all", "diagonal", "offdiagonal"], Tuple[Tuple[int, int], ...]]


@dataclass(frozen=True)
class FaultSpec:
    """Multiplicative change of entries in one subsystem's diagonal block.

    ``entries`` is a named rule over the block's nonzero entries or explicit
    ``(row, col)`` offsets inside the block.
    """

    target: str
    scale_factor: float
    start_time: int
    end_time: int
    entries: EntryRule = "all"

    def __post_init__(self) -> None:
        if not (math.isfinite(self.scale_factor) and self.scale_factor > 0):
            raise SimulationError(f"fault scale_factor must be positive, got {self.scale_factor!r}")
        if not self.start_time < self.end_time:
            raise SimulationError("fault start_time must precede end_time")
        if isinstance(self.entries, str):
            if self.entries not in ("all", "diagonal", "offdiagonal"):
                raise SimulationError(f"unknown fault entry rule {self.entries!r}")
        else:
            pairs = tuple((int(i), int(j)) for i, j in self.entries)
            if not pairs:
                raise SimulationError("explicit fault entry list is empty")
            object.__setattr__(self, "entries", pairs)

    def mask(self, sys: LtiSystem) -> np.ndarray:
        if self.target not in sys.blocks:
            raise SimulationError(f"fault target {self.target!r} is not a subsystem")
        lo, hi = sys.blocks[self.target]
        m = np.zeros_like(sys.A, dtype=bool)
        if isinstance(self.entries, str):
            m[lo:hi, lo:hi] = sys.A[lo:hi, lo:hi] != 0
            if self.entries == "diagonal":
                m &= np.eye(sys.n_states, dtype=bool)
            elif self.entries == "offdiagonal":
                m &= ~np.eye(sys.n_states, dtype=bool)
            return m
        for i, j in self.entries:
            if not (0 <= i < hi - lo and 0 <= j < hi - lo):
                raise SimulationError(f"fault entry ({i}, {j}) lies outside the {hi - lo}-state block of {self.target!r}")
            m[lo + i, lo + j] = True
        return m

    def faulty_matrix(self, sys: LtiSystem) -> np.ndarray:
        A = sys.A.copy()
        A[self.mask(sys)] *= self.scale_factor
        return A

    def to_dict(self) -> dict:
        d = asdict(self)
        if not isinstance(self.entries, str):
            d["entries"] = [list(p) for p in self.entries]
        return d


def rk4_step_matrices(A: np.ndarray, B: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """One classical RK4 step for ``dy/dt = A y + B u`` with ``u`` held constant.

    For linear dynamics the four stages collapse to ``y' = P y + Q u`` with
    ``P = sum_{k<=4} (dt A)^k / k!`` and ``Q = dt sum_{k<=3} (dt A)^k / (k+1)! B``.
    """
    n = A.shape[0]
    hA = dt * A
    I = np.eye(n)
    hA2 = hA @ hA
    hA3 = hA2 @ hA
    P = I + hA + hA2 / 2.0 + hA3 / 6.0 + (hA3 @ hA) / 24.0
    Q = dt * (I + hA / 2.0 + hA2 / 6.0 + hA3 / 24.0) @ B
    return P, Q


def _control_levels(n_inputs: int, n_steps: int, policy: ControlPolicy, rng: np.random.Generator) -> np.ndarray:
    n_holds = -(-n_steps // policy.hold)
    levels = rng.normal(policy.mean, policy.std, size=(n_holds, n_inputs))
    return np.repeat(levels, policy.hold, axis=0)[:n_steps]


def simulate(
    sys: LtiSystem,
    horizon: int,
    dt: float,
    control: ControlPolicy = ControlPolicy(),
    fault: FaultSpec | None = None,
    seed: int | None = None,
    t0: int = 0,
) -> TimeSeriesFrame:
    """Integrate the plant for ``horizon`` samples spaced ``dt`` apart.

    Row ``i`` carries timestamp ``t0 + i``; fault intervals are given in the
    same integer time index. Keep ``dt * ||A||_inf`` below about 0.5.
    """
    if horizon < 1:
        raise SimulationError("horizon must be positive")
    if not dt > 0:
        raise SimulationError("dt must be positive")
    rng = np.random.default_rng(seed)
    u = _control_levels(sys.B.shape[1], horizon, control, rng)
    noise = rng.normal(0.0, 1.0, size=(horizon, sys.n_states))

    if sys.y0 is not None:
        y = np.array(sys.y0, dtype=float)
    else:
        y = -np.linalg.solve(sys.A, sys.B @ np.full(sys.B.shape[1], control.mean))

    P_nom, Q_nom = rk4_step_matrices(sys.A, sys.B, dt)
    if fault is not None:
        P_bad, Q_bad = rk4_step_matrices(fault.faulty_matrix(sys), sys.B, dt)
    out = np.empty((horizon, sys.n_states))
    # divergence is reported as a SimulationError, not as a numpy warning
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(horizon):
            out[i] = y
            t = t0 + i
            if fault is not None and fault.start_time <= t < fault.end_time:
                y = P_bad @ y + Q_bad @ u[i]
            else:
                y = P_nom @ y + Q_nom @ u[i]
            if not np.isfinite(y).all():
                raise SimulationError(f"integration diverged at step {i}; reduce dt (currently {dt})")
    if sys.noise_std > 0:
        out = out + sys.noise_std * noise
    names = [p for s in sys.blocks for p in signal_names(s, sys.blocks[s][1] - sys.blocks[s][0])]
    return TimeSeriesFrame(range(t0, t0 + horizon), names, out)


def stable_dt(sys: LtiSystem, margin: float = 0.25) -> float:
    """Step size with ``dt * ||A||_inf == margin``."""
    return margin / float(np.max(np.sum(np.abs(sys.A), axis=1)))


@dataclass(frozen=True)
class TrialConfig:
    """Ranges the trial generator samples from; each range is inclusive."""

    nodes: tuple[int, int] = (5, 50)
    edge_density: tuple[float, float] = (0.05, 0.15)
    allow_cycles: bool = True
    signals_per_node: tuple[int, int] = (2, 5)
    coupling_scale: float = 1.0
    damping: float = 1.0
    # one shared input keeps nominal level patterns on a line, so parameter faults leave it
    n_inputs: int | None = 1
    noise_std: tuple[float, float] = (0.01, 0.05)
    fault_scale: tuple[float, float] = (3.0, 10.0)
    # a FaultSpec rule, or "random_diagonal": one diagonal entry of the target block
    fault_entries: str = "random_diagonal"
    control: ControlPolicy = field(default_factory=ControlPolicy)
    train_len: int = 4096
    validation_len: int = 2048
    calibration_len: int = 8192
    test_len: int = 1024
    fault_start: int = 256
    fault_len: int = 512
    dt_margin: float = 0.25

    def __post_init__(self) -> None:
        lo, hi = self.nodes
        if not 2 <= lo <= hi <= 200:
            raise SimulationError(f"node range {self.nodes!r} must lie within [2, 200]")
        if not 0 <= self.fault_start < self.fault_start + self.fault_len <= self.test_len:
            raise SimulationError("fault interval must lie inside the test segment")
        if self.n_inputs is not None and self.n_inputs < 1:
            raise SimulationError(f"n_inputs must be positive or None, got {self.n_inputs!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TrialDataset:
    graph: CausalGraph
    signal_map: SubsystemSignalsMap
    train: TimeSeriesFrame
    validation: TimeSeriesFrame
    calibration: TimeSeriesFrame
    test: TimeSeriesFrame
    fault: FaultSpec
    seed: int
    manifest: dict

    FILES = (
        "graph.json",
        "map.json",
        "train.csv",
        "validation.csv",
        "calibration.csv",
        "test.csv",
        "fault.json",
        "manifest.json",
    )

    def save(self, directory: str | Path) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.graph.dump(d / "graph.json")
        self.signal_map.dump(d / "map.json")
        for name in ("train", "validation", "calibration", "test"):
            getattr(self, name).write_csv(d / f"{name}.csv")
        fault = self.fault.to_dict() | {"seed": self.seed}
        (d / "fault.json").write_text(json.dumps(fault, indent=2, sort_keys=True) + "\n")
        (d / "manifest.json").write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")
        return d

    @classmethod
    def load(cls, directory: str | Path) -> TrialDataset:
        d = Path(directory)
        fault = json.loads((d / "fault.json").read_text())
        seed = fault.pop("seed")
        return cls(
            graph=CausalGraph.load(d / "graph.json"),
            signal_map=SubsystemSignalsMap.load(d / "map.json"),
            train=TimeSeriesFrame.read_csv(d / "train.csv"),
            validation=TimeSeriesFrame.read_csv(d / "validation.csv"),
            calibration=TimeSeriesFrame.read_csv(d / "calibration.csv"),
            test=TimeSeriesFrame.read_csv(d / "test.csv"),
            fault=FaultSpec(**fault),
            seed=seed,
            manifest=json.loads((d / "manifest.json").read_text()),
        )


def make_trial(config: TrialConfig = TrialConfig(), seed: int = 0) -> TrialDataset:
    """Sample one benchmark trial; everything drawn is recorded in the manifest."""
    rng = np.random.default_rng(seed)
    sub_seeds = rng.integers(0, 2**63 - 1, size=3)
    n_nodes = int(rng.integers(config.nodes[0], config.nodes[1] + 1))
    min_density = (n_nodes - 1) / (n_nodes * (n_nodes - 1))
    density = max(float(rng.uniform(*config.edge_density)), min_density)
    noise = float(rng.uniform(*config.noise_std))
    scale = float(rng.uniform(*config.fault_scale))

    g = sample_graph(n_nodes, density, config.allow_cycles, seed=int(sub_seeds[0]))
    sys = build_system(
        g,
        config.signals_per_node,
        config.coupling_scale,
        config.damping,
        noise,
        seed=int(sub_seeds[1]),
        n_inputs=config.n_inputs,
    )
    target = g.nodes[int(rng.integers(0, n_nodes))]
    dt = stable_dt(sys, config.dt_margin)
    entries = config.fault_entries
    if entries == "random_diagonal":
        lo, hi = sys.blocks[target]
        j = int(rng.integers(0, hi - lo))
        entries = ((j, j),)

    n_nominal = config.train_len + config.validation_len + config.calibration_len
    test_t0 = n_nominal
    fault = FaultSpec(
        target,
        scale,
        test_t0 + config.fault_start,
        test_t0 + config.fault_start + config.fault_len,
        entries,  # type: ignore[arg-type]
    )
    run = simulate(sys, n_nominal + config.test_len, dt, config.control, fault, seed=int(sub_seeds[2]))
    a = config.train_len
    b = a + config.validation_len
    manifest = {
        "seed": seed,
        "n_nodes": n_nodes,
        "n_edges": len(g.edges),
        "edge_density": density,
        "n_signals": sys.n_states,
        "noise_std": noise,
        "fault_target": target,
        "fault_scale": scale,
        "dt": dt,
        "config": config.to_dict(),
    }
    # JSON types throughout, so a loaded manifest compares equal
    manifest = json.loads(json.dumps(manifest))
    return TrialDataset(
        graph=g,
        signal_map=sys.signal_map(),
        train=run.slice(0, a),
        validation=run.slice(a, b),
        calibration=run.slice(b, n_nominal),
        test=run.slice(n_nominal, len(run)),
        fault=fault,
        seed=seed,
        manifest=manifest,
    )
