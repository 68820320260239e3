import math

import numpy as np
import pytest

from entsft import dist
from entsft.tempsearch import (
    GateConfig,
    TempSearchConfig,
    TemperatureSearchError,
    TokenTempPlan,
    entropy_increment,
    plan_batch,
    solve_temperature,
)

# sigmoid(-2.4) computed directly: 1 / (1 + e^2.4)
SIG_MINUS_24 = 1.0 / (1.0 + math.exp(2.4))


def test_gate_half_increment_at_pivot():
    gate = GateConfig()
    assert entropy_increment(gate.pivot, gate) == gate.max_increment / 2.0


def test_gate_low_entropy_value_matches_sigmoid_oracle():
    gate = GateConfig()
    value = entropy_increment(0.0, gate)
    assert abs(value - 0.5 * SIG_MINUS_24) < 1e-15
    assert abs(value - 0.04158634824696117) < 1e-12


def test_gate_saturates_at_max_increment():
    gate = GateConfig()
    assert abs(entropy_increment(50.0, gate) - gate.max_increment) < 1e-15
    assert entropy_increment(10.0, gate) > 0.4999


def test_gate_strictly_increasing():
    gate = GateConfig()
    grid = np.linspace(0.0, 6.0, 500)
    vals = entropy_increment(grid, gate)
    assert np.all(np.diff(vals) > 0)


def test_gate_config_validation():
    with pytest.raises(ValueError):
        GateConfig(max_increment=0.0)
    with pytest.raises(ValueError):
        GateConfig(sharpness=-1.0)
    with pytest.raises(ValueError):
        GateConfig(pivot=-0.1)
    with pytest.raises(ValueError):
        TempSearchConfig(tau_min=0.9)
    with pytest.raises(ValueError):
        TempSearchConfig(tau_min=1.4, tau_max=1.2)
    with pytest.raises(ValueError):
        TempSearchConfig(epsilon=0.0)


def _sweep_entropy(row, tau, k):
    return dist.entropy_topk(row, tau, k)


def test_solve_hits_target_from_dense_sweep():
    # Oracle: dense tau sweep locates the entropy at tau=1.3; the solver must
    # come back to 1.3 within bisection resolution.
    row = np.array([3.0, 1.0, 0.0, 0.0])
    cfg = TempSearchConfig(top_k=4)
    taus = np.arange(1.1, 1.5 + 1e-9, 1e-4)
    ents = np.array([_sweep_entropy(row, float(t), 4) for t in taus])
    target = ents[np.argmin(np.abs(taus - 1.3))]
    plan = solve_temperature(row, float(target), cfg)
    assert not plan.clamped
    assert abs(plan.solved_tau - 1.3) < 1e-4 + 1e-8
    assert abs(plan.achieved_entropy - target) <= cfg.epsilon


def test_solve_boundary_target_is_unclamped():
    row = np.array([2.0, 0.5, -1.0])
    cfg = TempSearchConfig(top_k=3)
    target = dist.entropy_topk(row, cfg.tau_min, 3)
    plan = solve_temperature(row, target, cfg)
    assert not plan.clamped
    assert abs(plan.solved_tau - cfg.tau_min) < 1e-6


def test_uniform_row_clamps_high():
    row = np.zeros(8)
    cfg = TempSearchConfig(top_k=8)
    plan = solve_temperature(row, math.log(8) + 0.3, cfg)
    assert plan.clamped
    assert plan.solved_tau == cfg.tau_max
    assert abs(plan.achieved_entropy - math.log(8)) < 1e-12


def test_low_target_clamps_to_tau_min():
    row = np.array([4.0, 0.0, -1.0, -1.0])
    cfg = TempSearchConfig(top_k=4)
    plan = solve_temperature(row, 0.0, cfg)
    assert plan.clamped
    assert plan.solved_tau == cfg.tau_min


def test_solve_rejects_bad_inputs():
    cfg = TempSearchConfig(top_k=4)
    with pytest.raises(ValueError):
        solve_temperature(np.array([1.0, np.nan, 0.0]), 1.0, cfg)
    with pytest.raises(ValueError):
        solve_temperature(np.array([1.0, 2.0, 0.0]), float("nan"), cfg)


def test_search_failure_carries_residual():
    row = np.array([2.0, 1.0, 0.0, -1.0])
    cfg = TempSearchConfig(max_iters=1, epsilon=1e-12, top_k=4)
    base = dist.entropy_topk(row, 1.0, 4)
    lo = dist.entropy_topk(row, cfg.tau_min, 4)
    hi = dist.entropy_topk(row, cfg.tau_max, 4)
    target = 0.5 * (lo + hi)  # strictly inside, unreachable in one halving
    with pytest.raises(TemperatureSearchError) as err:
        solve_temperature(row, float(target), cfg)
    assert err.value.row_indices == [0]
    assert err.value.residuals[0] > 1e-12
    assert base <= target


def test_plan_batch_identical_rows_identical_plans():
    row = np.array([2.5, 1.0, 0.3, -0.5, 0.0])
    rows = np.tile(row, (6, 1))
    plans = plan_batch(rows, GateConfig(), TempSearchConfig(top_k=5))
    first = plans[0]
    for p in plans[1:]:
        assert p == first


def test_plan_batch_equals_scalar_route():
    rng = np.random.default_rng(11)
    gate = GateConfig()
    cfg = TempSearchConfig(top_k=16)
    rows = rng.normal(0, 1.5, size=(64, 16)) * rng.uniform(0.3, 4.0, size=(64, 1))
    plans = plan_batch(rows, gate, cfg)
    for i in range(rows.shape[0]):
        base = dist.entropy_topk(rows[i], 1.0, cfg.top_k)
        target = base + float(entropy_increment(base, gate))
        single = solve_temperature(rows[i], target, cfg)
        assert abs(single.solved_tau - plans[i].solved_tau) <= 1e-12
        assert single.clamped == plans[i].clamped
        assert abs(single.achieved_entropy - plans[i].achieved_entropy) <= 1e-12


def test_plan_batch_mixed_uniform_and_peaked():
    rows = np.stack([np.zeros(8), np.array([6.0, 0, 0, 0, 0, 0, 0, 0])])
    gate = GateConfig()
    cfg = TempSearchConfig(top_k=8)
    plans = plan_batch(rows, gate, cfg)
    for i in range(2):
        base = dist.entropy_topk(rows[i], 1.0, cfg.top_k)
        target = base + float(entropy_increment(base, gate))
        single = solve_temperature(rows[i], target, cfg)
        assert plans[i].solved_tau == single.solved_tau
        assert plans[i].clamped == single.clamped
    assert plans[0].clamped  # uniform row cannot raise its entropy


def test_plan_batch_residuals_and_increment_bounds():
    rng = np.random.default_rng(12)
    gate = GateConfig()
    cfg = TempSearchConfig(top_k=32)
    rows = rng.normal(0, 1, size=(2000, 32)) * rng.uniform(0.2, 5.0, size=(2000, 1))
    plans = plan_batch(rows, gate, cfg)
    for p in plans:
        assert 0.0 <= p.increment <= gate.max_increment + 1e-12
        if p.clamped:
            assert p.solved_tau in (cfg.tau_min, cfg.tau_max)
        else:
            assert abs(p.achieved_entropy - p.target_entropy) <= cfg.epsilon
            # the tempered teacher never drops below the base entropy
            assert p.achieved_entropy >= p.base_entropy - 1e-12


def test_plan_batch_error_names_offending_row():
    rows = np.ones((3, 4))
    rows[1, 2] = np.inf
    with pytest.raises(ValueError, match=r"rows \[1\]"):
        plan_batch(rows, GateConfig(), TempSearchConfig(top_k=4))


def test_bisection_iteration_budget_reaches_tau_resolution():
    # ceil(log2(0.4 / 1e-6)) = 19 halvings reach 1e-6 tau precision.
    row = np.array([2.0, 1.0, 0.5, -0.3])
    cfg_19 = TempSearchConfig(max_iters=19, top_k=4)
    cfg_30 = TempSearchConfig(max_iters=30, top_k=4)
    target = dist.entropy_topk(row, 1.27, 4)
    a = solve_temperature(row, target, cfg_19)
    b = solve_temperature(row, target, cfg_30)
    assert abs(a.solved_tau - b.solved_tau) < 1e-6
    assert abs(b.solved_tau - 1.27) < 4e-10 + (1.5 - 1.1) / 2 ** 30
