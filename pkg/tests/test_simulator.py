import math
from dataclasses import replace

import numpy as np
import pytest

from cpsdiag.graph import CausalGraph, reachable_set
from cpsdiag.simulator import (
    ControlPolicy,
    FaultSpec,
    LtiSystem,
    SimulationError,
    TrialConfig,
    TrialDataset,
    build_system,
    make_trial,
    rk4_step_matrices,
    sample_graph,
    simulate,
    stable_dt,
)
from cpsdiag.symptoms import BinarizationConfig, calibrate_thresholds, fit_linear_subspace_model

from .conftest import SMALL_TRIAL


def test_rk4_matches_exponential_decay():
    sys = LtiSystem(-np.eye(1), np.zeros((1, 1)), {"X": (0, 1)}, 0.0, y0=np.ones(1))
    dt = 0.01
    frame = simulate(sys, horizon=501, dt=dt, seed=0)
    t = np.arange(501) * dt
    assert np.max(np.abs(frame.values[:, 0] - np.exp(-t))) < 1e-6


def test_rk4_matrices_equal_four_stage_step():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(4, 4)) - 3 * np.eye(4)
    B = rng.normal(size=(4, 2))
    y = rng.normal(size=4)
    u = rng.normal(size=2)
    h = 0.05

    def f(v):
        return A @ v + B @ u

    k1 = f(y)
    k2 = f(y + h / 2 * k1)
    k3 = f(y + h / 2 * k2)
    k4 = f(y + h * k3)
    expected = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    P, Q = rk4_step_matrices(A, B, h)
    np.testing.assert_allclose(P @ y + Q @ u, expected, rtol=1e-13, atol=1e-13)


def test_sample_graph_smallest_case():
    seen = set()
    for seed in range(20):
        g = sample_graph(2, 1.0, allow_cycles=False, seed=seed)
        assert len(g.edges) == 1
        seen |= g.edges
    assert seen == {("S0", "S1"), ("S1", "S0")}


@pytest.mark.parametrize("seed", range(10))
def test_sample_graph_acyclic(seed):
    g = sample_graph(5, 0.6, allow_cycles=False, seed=seed)
    assert g.is_acyclic()
    assert g.is_weakly_connected()


def test_sample_graph_large():
    g = sample_graph(100, 0.05, seed=3)
    assert len(g.edges) == math.ceil(0.05 * 100 * 99)
    assert g.is_weakly_connected()
    assert g == sample_graph(100, 0.05, seed=3)


def test_sample_graph_density_too_low():
    with pytest.raises(SimulationError, match="density >="):
        sample_graph(50, 0.001, seed=0)
    with pytest.raises(SimulationError):
        sample_graph(1, 0.5)


def _assert_mask(sys: LtiSystem, g: CausalGraph):
    for l in g.nodes:
        for m in g.nodes:
            if l != m and (l, m) not in g.edges:
                # block row m, column l: states of l driving m
                assert not np.any(sys.block(m, l)), (l, m)


@pytest.mark.parametrize("seed", range(15))
def test_zero_pattern_follows_edges(seed):
    g = sample_graph(12, 0.15, seed=seed)
    _assert_mask(build_system(g, seed=seed), g)


def test_edge_convention_and_block_sizes():
    g = CausalGraph(["s1", "s2"], [("s1", "s2")])
    sys = build_system(g, seed=4)
    assert not np.any(sys.block("s1", "s2"))
    assert np.any(sys.block("s2", "s1"))
    for lo, hi in sys.blocks.values():
        assert 2 <= hi - lo <= 5
    empty = CausalGraph("ABC")
    sys = build_system(empty, seed=1)
    _assert_mask(sys, empty)


def _power_iteration_abscissa(A, dt=0.01, steps=4000, seed=0):
    # growth rate of y <- P y estimates exp(dt * max Re(lambda))
    P, _ = rk4_step_matrices(A, np.zeros((A.shape[0], 1)), dt)
    y = np.random.default_rng(seed).normal(size=A.shape[0])
    logs = []
    for _ in range(steps):
        y = P @ y
        n = np.linalg.norm(y)
        logs.append(math.log(n))
        y /= n
    return float(np.mean(logs[steps // 2 :])) / dt


@pytest.mark.parametrize("seed", range(8))
def test_eigenvalues_respect_damping(seed):
    g = sample_graph(8, 0.2, seed=seed)
    damping = 0.8
    sys = build_system(g, damping=damping, seed=seed)
    direct = float(np.max(np.linalg.eigvals(sys.A).real))
    assert direct <= -damping / 2
    assert abs(direct - _power_iteration_abscissa(sys.A)) < 0.05
    assert _power_iteration_abscissa(sys.A) <= -damping / 2 + 0.05


def test_identity_fault_is_bitwise_equal():
    g = sample_graph(6, 0.2, seed=2)
    sys = build_system(g, noise_std=0.02, seed=2)
    dt = stable_dt(sys)
    base = simulate(sys, 400, dt, seed=9)
    fault = FaultSpec(g.nodes[0], 1.0, 100, 300)
    same = simulate(sys, 400, dt, fault=fault, seed=9)
    assert np.array_equal(base.values, same.values)


def test_fault_mask_rules():
    g = CausalGraph("AB", [("A", "B")])
    sys = build_system(g, signals_per_node=(3, 3), seed=0)
    lo, hi = sys.blocks["B"]
    all_mask = FaultSpec("B", 2.0, 0, 1).mask(sys)
    assert all_mask.sum() == 9 and all_mask[lo:hi, lo:hi].all()
    assert FaultSpec("B", 2.0, 0, 1, "diagonal").mask(sys).sum() == 3
    assert FaultSpec("B", 2.0, 0, 1, "offdiagonal").mask(sys).sum() == 6
    one = FaultSpec("B", 2.0, 0, 1, ((1, 1),))
    A = one.faulty_matrix(sys)
    assert A[lo + 1, lo + 1] == 2.0 * sys.A[lo + 1, lo + 1]
    assert np.count_nonzero(A != sys.A) == 1
    with pytest.raises(SimulationError, match="outside"):
        FaultSpec("B", 2.0, 0, 1, ((3, 0),)).mask(sys)
    with pytest.raises(SimulationError):
        FaultSpec("Z", 2.0, 0, 1).mask(sys)


@pytest.mark.parametrize(
    "kwargs",
    [{"scale_factor": 0.0}, {"scale_factor": float("inf")}, {"start_time": 5, "end_time": 5}, {"entries": "rows"}],
)
def test_fault_spec_validation(kwargs):
    base = {"target": "A", "scale_factor": 2.0, "start_time": 0, "end_time": 10}
    with pytest.raises(SimulationError):
        FaultSpec(**(base | kwargs))


def test_divergence_names_dt():
    sys = LtiSystem(-np.eye(2) * 100, np.zeros((2, 1)), {"X": (0, 2)}, y0=np.ones(2))
    with pytest.raises(SimulationError, match="dt"):
        simulate(sys, 2000, dt=1.0)


def test_nominal_runs_stay_bounded():
    for seed in range(5):
        g = sample_graph(15, 0.1, seed=seed)
        sys = build_system(g, noise_std=0.05, seed=seed, n_inputs=1)
        frame = simulate(sys, 3000, stable_dt(sys), seed=seed)
        assert np.max(np.abs(frame.values)) < 1e6


def test_simulation_is_seed_deterministic():
    g = sample_graph(6, 0.2, seed=1)
    sys = build_system(g, noise_std=0.03, seed=1)
    a = simulate(sys, 300, 0.01, control=ControlPolicy(hold=7), seed=5)
    b = simulate(sys, 300, 0.01, control=ControlPolicy(hold=7), seed=5)
    assert np.array_equal(a.values, b.values)
    c = simulate(sys, 300, 0.01, control=ControlPolicy(hold=7), seed=6)
    assert not np.array_equal(a.values, c.values)


def test_faults_propagate_downstream_only():
    child_dev, other_dev = [], []
    for seed in range(20):
        g = sample_graph(10, 0.12, seed=seed)
        sys = build_system(g, seed=seed, n_inputs=1)
        src = next(n for n in g.nodes if g.successors(n))
        child = g.successors(src)[0]
        outsiders = [n for n in g.nodes if n not in reachable_set(g, src)]
        dt = stable_dt(sys)
        fault = FaultSpec(src, 5.0, 200, 800, ((0, 0),))
        base = simulate(sys, 800, dt, seed=seed)
        bad = simulate(sys, 800, dt, fault=fault, seed=seed)
        diff = np.abs(bad.values - base.values)[200:]

        def dev(sub):
            a, b = sys.blocks[sub]
            return float(diff[:, a:b].mean())

        child_dev.append(dev(child))
        other_dev.extend(dev(o) for o in outsiders)
    assert np.mean(child_dev) > np.mean(other_dev)
    assert max(other_dev, default=0.0) == 0.0


def test_make_trial_deterministic_and_consistent():
    a = make_trial(SMALL_TRIAL, seed=11)
    b = make_trial(SMALL_TRIAL, seed=11)
    assert a.manifest == b.manifest
    assert a.test.to_csv_text() == b.test.to_csv_text()
    assert a.fault.target in a.graph
    assert set(a.signal_map.subsystems) == set(a.graph.nodes)
    spans = [(f.timestamps[0], f.timestamps[-1]) for f in (a.train, a.validation, a.calibration)]
    for (s0, e0), (s1, e1) in zip(spans, spans[1:]):
        assert e0 < s1
    assert a.test.timestamps[0] <= a.fault.start_time < a.fault.end_time <= a.test.timestamps[-1] + 1
    for key in ("seed", "n_nodes", "n_edges", "noise_std", "fault_target", "fault_scale", "dt", "config"):
        assert key in a.manifest


def test_node_range_honored_over_many_trials():
    cfg = replace(
        TrialConfig(),
        nodes=(5, 100),
        train_len=64,
        validation_len=64,
        calibration_len=64,
        test_len=64,
        fault_start=8,
        fault_len=32,
    )
    counts = []
    for seed in range(100):
        ds = make_trial(cfg, seed)
        counts.append(ds.manifest["n_nodes"])
        assert ds.fault.target in ds.graph
    assert min(counts) >= 5 and max(counts) <= 100
    assert min(counts) < 20 and max(counts) > 85


def test_trial_config_validation():
    with pytest.raises(SimulationError):
        TrialConfig(nodes=(1, 5))
    with pytest.raises(SimulationError):
        TrialConfig(fault_start=1000, fault_len=100, test_len=1024)
    with pytest.raises(SimulationError):
        TrialConfig(n_inputs=0)


def test_scaled_fault_exceeds_nominal_p99_in_most_trials():
    cfg = replace(SMALL_TRIAL, fault_scale=(5.0, 5.0), noise_std=(0.01, 0.01))
    above = 0
    for seed in range(12):
        ds = make_trial(cfg, seed=seed)
        model = fit_linear_subspace_model(ds.train, ds.signal_map)
        thr = calibrate_thresholds(model, ds.calibration, BinarizationConfig.percentile(99)).thresholds
        lo = ds.fault.start_time - ds.test.timestamps[0]
        hi = ds.fault.end_time - ds.test.timestamps[0]
        R = model.subsystem_residuals(ds.test.slice(lo, hi))
        j = model.signal_map.subsystems.index(ds.fault.target)
        above += np.median(R[:, j]) > thr[ds.fault.target]
    # 11 of 12 observed; a scaled entry with little coupling can stay quiet
    assert above >= 10


def test_dataset_round_trip(tmp_path, small_trial):
    ds = small_trial
    ds.save(tmp_path / "d")
    assert sorted(p.name for p in (tmp_path / "d").iterdir()) == sorted(TrialDataset.FILES)
    back = TrialDataset.load(tmp_path / "d")
    assert back.graph == ds.graph
    assert back.fault == ds.fault
    assert back.seed == ds.seed
    assert back.manifest == ds.manifest
    for name in ("train", "validation", "calibration", "test"):
        a, b = getattr(ds, name), getattr(back, name)
        assert a.timestamps == b.timestamps
        assert np.max(np.abs(a.values - b.values)) <= 1e-12
