import math
from pathlib import Path

import numpy as np
import pytest

from entsft import dist, oracles, projection


def test_sweep_monotone_for_nonconstant_row():
    row = np.array([2.0, 0.5, -1.0, 0.0])
    grid = np.arange(0.5, 3.0, 0.01)
    table = oracles.dense_temperature_sweep(row, grid)
    assert table.shape == (grid.shape[0], 2)
    assert np.all(np.diff(table[:, 1]) >= -1e-12)


def test_sweep_constant_for_uniform_row():
    table = oracles.dense_temperature_sweep(np.zeros(6), np.array([0.5, 1.0, 2.0]))
    np.testing.assert_allclose(table[:, 1], math.log(6), atol=1e-12)


def test_sweep_slope_matches_variance_form():
    rng = np.random.default_rng(0)
    step = 1e-5
    for _ in range(20):
        row = rng.normal(0, 2, size=12)
        tau = float(rng.uniform(0.6, 2.5))
        table = oracles.dense_temperature_sweep(row, np.array([tau - step, tau + step]))
        fd = (table[1, 1] - table[0, 1]) / (2 * step)
        analytic = oracles.entropy_slope(row, tau)
        assert abs(fd - analytic) / max(abs(analytic), 1e-12) <= 1e-4


def test_sweep_rejects_unsorted_grid():
    with pytest.raises(ValueError):
        oracles.dense_temperature_sweep(np.array([1.0, 0.0]), np.array([2.0, 1.0]))


def test_finite_difference_calibration_quadratic():
    grad = oracles.finite_difference_grad(lambda x: float((x ** 2).sum()),
                                          np.array([3.0]), step=1e-5)
    assert abs(grad[0] - 6.0) <= 1e-8


def test_finite_difference_params_helper():
    params = {"a": np.array([[1.0, 2.0], [3.0, 4.0]])}

    def f(p):
        return float((p["a"] ** 3).sum())

    slopes = oracles.finite_difference_grad_params(f, params, [("a", 0), ("a", 3)])
    assert abs(slopes[0] - 3.0) < 1e-6
    assert abs(slopes[1] - 48.0) < 1e-5
    assert params["a"][0, 0] == 1.0  # restored


def test_projection_delta_zero_returns_base():
    rng = np.random.default_rng(1)
    p = rng.dirichlet(np.ones(6))
    res = projection.constrained_projection_solve(p, 0.0)
    assert 0.5 * np.abs(res.q - p).sum() < 1e-9
    assert res.kl_to_base < 1e-12


def test_projection_matches_temperature_scaling():
    rng = np.random.default_rng(2)
    checked = 0
    while checked < 5:
        p = rng.dirichlet(np.full(5, 0.6))
        p = np.maximum(p, 1e-5)
        p /= p.sum()
        h = dist.entropy(dist.ProbDist(p, 1.0))
        if h + 0.2 >= math.log(5) - 1e-3:
            continue
        checked += 1
        res = projection.constrained_projection_solve(p, 0.2)
        # Entropy-matched temperature via dense bisection on the exact curve.
        logits = np.log(p)
        lo, hi = 1.0, 1e6
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if dist.entropy(dist.softmax_temp(logits, mid)) < res.target_entropy:
                lo = mid
            else:
                hi = mid
        ref = dist.softmax_temp(logits, 0.5 * (lo + hi)).probs
        assert 0.5 * np.abs(res.q - ref).sum() <= 1e-3
        assert abs(res.entropy - res.target_entropy) <= 1e-4  # active constraint
        assert res.kkt_residual <= 1e-8
        assert res.multiplier > 0


def test_projection_solution_beats_nearby_feasible_points():
    # Optimality cross-check: random feasible perturbations cannot do better.
    rng = np.random.default_rng(3)
    p = rng.dirichlet(np.ones(4))
    p = np.maximum(p, 1e-4)
    p /= p.sum()
    res = projection.constrained_projection_solve(p, 0.15)
    for _ in range(200):
        q = res.q + rng.normal(0, 1e-3, size=4)
        q = np.maximum(q, 1e-12)
        q /= q.sum()
        h = -(q * np.log(q)).sum()
        if h >= res.target_entropy:  # feasible
            kl = (q * np.log(q / p)).sum()
            assert kl >= res.kl_to_base - 1e-9


def test_projection_infeasible_target_raises():
    p = np.full(4, 0.25)
    with pytest.raises(ValueError):
        projection.constrained_projection_solve(p, 0.1)  # already at log 4
    skew = np.array([0.7, 0.1, 0.1, 0.1])
    with pytest.raises(ValueError):
        projection.constrained_projection_solve(skew, 10.0)
    with pytest.raises(ValueError):
        projection.constrained_projection_solve(np.array([0.5, 0.5, 0.0]), 0.05)
    with pytest.raises(ValueError):
        projection.constrained_projection_solve(np.full(32, 1 / 32), 0.1)


def test_projection_module_never_touches_temperature_scaling():
    # Independence audit: the solver must not import the distribution module
    # or call its temperature-scaled softmax.
    source = Path(projection.__file__).read_text()
    assert "softmax_temp" not in source
    assert "from .dist" not in source and "import dist" not in source
    assert "tempsearch" not in source


def test_relative_error_metric():
    assert oracles.relative_error([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert oracles.relative_error([1.0], [2.0]) == 0.5
