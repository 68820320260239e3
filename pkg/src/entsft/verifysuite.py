"""Runnable verification suite: each check pits an implementation path
against an independent brute-force oracle and reports the measured residual
next to its tolerance. The `verify` CLI command runs these and exits
non-zero if any check fails; the test suite asserts on the same results.
"""

from __future__ import annotations

import time

import numpy as np

from . import dist, losses, model, oracles, projection, teacher
from .tempsearch import (
    GateConfig, TempSearchConfig, entropy_increment, plan_batch, solve_temperature,
)


def _record(check: str, tolerance: float, residual: float, **extra) -> dict:
    rec = {
        "check": check,
        "tolerance": tolerance,
        "residual": residual,
        "pass": bool(residual <= tolerance),
    }
    rec.update(extra)
    return rec


def check_monotonicity(n_rows: int = 1000, vocab: int = 32, sigma: float = 3.0,
                       tau_lo: float = 0.5, tau_hi: float = 3.0, grid_step: float = 0.01,
                       fd_step: float = 1e-5, seed: int = 0) -> list[dict]:
    """Entropy never decreases along a temperature grid, and the slope
    matches Var[z]/tau^3 by central differences."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    rows = rng.normal(0.0, sigma, size=(n_rows, vocab))
    grid = np.arange(tau_lo, tau_hi + grid_step / 2, grid_step)

    ent = np.empty((grid.shape[0], n_rows))
    slopes_fd = np.empty_like(ent)
    slopes_an = np.empty_like(ent)
    for i, tau in enumerate(grid):
        ent[i] = dist.entropy_from_logit_rows(rows, float(tau))
        hi = dist.entropy_from_logit_rows(rows, float(tau) + fd_step)
        lo = dist.entropy_from_logit_rows(rows, float(tau) - fd_step)
        slopes_fd[i] = (hi - lo) / (2.0 * fd_step)
        p = dist.softmax_rows(rows, float(tau))
        mean = (p * rows).sum(axis=-1, keepdims=True)
        var = (p * (rows - mean) ** 2).sum(axis=-1)
        slopes_an[i] = var / float(tau) ** 3

    worst_decrease = max(float(-(np.diff(ent, axis=0)).min()), 0.0)
    rel = np.abs(slopes_fd - slopes_an) / np.maximum(np.abs(slopes_an), 1e-12)
    elapsed = time.perf_counter() - t0
    return [
        _record("entropy_monotone_in_temperature", 1e-9, worst_decrease,
                rows=n_rows, grid_points=int(grid.shape[0]), seconds=round(elapsed, 3)),
        _record("entropy_slope_equals_variance_identity", 1e-4, float(rel.max()),
                seconds=round(elapsed, 3)),
    ]


def check_identity(n: int = 1000, seed: int = 0) -> list[dict]:
    """KL(p || uniform) equals log V - H(p) for random distributions."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        vocab = int(rng.integers(2, 65))
        p = rng.dirichlet(np.full(vocab, 0.5))
        pd = dist.ProbDist(p, 1.0)
        uniform = dist.ProbDist(np.full(vocab, 1.0 / vocab), 1.0)
        gap = abs(dist.kl_divergence(pd, uniform) - (np.log(vocab) - dist.entropy(pd)))
        worst = max(worst, gap)
    return [_record("kl_to_uniform_identity", 1e-10, worst, samples=n)]


def check_search(n: int = 10000, vocab: int = 64, seed: int = 0,
                 scalar_sample: int | None = None) -> list[dict]:
    """Batched temperature search: unclamped residual within epsilon,
    clamped rows exactly at an endpoint, batch equals per-row calls."""
    rng = np.random.default_rng(seed)
    scales = rng.uniform(0.2, 6.0, size=(n, 1))
    rows = rng.normal(0.0, 1.0, size=(n, vocab)) * scales
    gate = GateConfig()
    cfg = TempSearchConfig(top_k=min(512, vocab))
    plans = plan_batch(rows, gate, cfg)

    unclamped = [p for p in plans if not p.clamped]
    clamped = [p for p in plans if p.clamped]
    res_unclamped = max(
        (abs(p.achieved_entropy - p.target_entropy) for p in unclamped), default=0.0)
    endpoint_gap = max(
        (min(abs(p.solved_tau - cfg.tau_min), abs(p.solved_tau - cfg.tau_max))
         for p in clamped), default=0.0)

    count = n if scalar_sample is None else min(n, scalar_sample)
    worst_tau_gap = 0.0
    for i in range(count):
        base = dist.entropy_topk(rows[i], 1.0, cfg.top_k)
        target = base + entropy_increment(base, gate)
        single = solve_temperature(rows[i], target, cfg)
        worst_tau_gap = max(worst_tau_gap, abs(single.solved_tau - plans[i].solved_tau))

    return [
        _record("search_unclamped_residual", 1e-3, res_unclamped,
                rows=n, unclamped=len(unclamped), clamped=len(clamped)),
        _record("search_clamped_at_endpoint", 0.0, endpoint_gap),
        _record("search_batch_equals_scalar", 1e-12, worst_tau_gap, compared=count),
    ]


def check_projection(n_bases: int = 50, deltas=(0.05, 0.2, 0.4), seed: int = 0) -> list[dict]:
    """The independent constrained-KL solver lands on the temperature-scaled
    distribution whose entropy matches the target."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst_tv = 0.0
    worst_gap = 0.0
    solved = 0
    for _ in range(n_bases):
        vocab = int(rng.integers(3, 9))
        p = rng.dirichlet(np.full(vocab, 1.0))
        p = np.maximum(p, 1e-6)
        p /= p.sum()
        h_base = dist.entropy(dist.ProbDist(p, 1.0))
        for delta in deltas:
            if h_base + delta >= np.log(vocab) - 1e-3:
                continue
            result = projection.constrained_projection_solve(p, float(delta))
            solved += 1
            # Reference: temperature-scaled distribution at the entropy-matched tau.
            logits = np.log(p)
            lo, hi = 1.0, 1e6
            target = h_base + delta
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                if dist.entropy(dist.softmax_temp(logits, mid)) < target:
                    lo = mid
                else:
                    hi = mid
            ref = dist.softmax_temp(logits, 0.5 * (lo + hi)).probs
            worst_tv = max(worst_tv, 0.5 * float(np.abs(result.q - ref).sum()))
            worst_gap = max(worst_gap, abs(result.entropy - result.target_entropy))
    elapsed = time.perf_counter() - t0
    return [
        _record("projection_matches_temperature_scaling", 1e-3, worst_tv,
                instances=solved, seconds=round(elapsed, 2)),
        _record("projection_entropy_constraint_active", 1e-4, worst_gap),
    ]


def check_gradients(seed: int = 0) -> list[dict]:
    """Analytic loss gradients vs central differences, on raw logit rows and
    through the full model."""
    rng = np.random.default_rng(seed)
    records = []
    n, vocab = 12, 9
    z = rng.normal(0.0, 2.0, size=(n, vocab))
    y = rng.integers(0, vocab, size=n)
    base = rng.normal(0.0, 2.0, size=(n, vocab))
    t_rows = rng.normal(0.0, 2.0, size=(n, vocab))
    taus = rng.uniform(1.1, 1.5, size=n).tolist()

    cases = {
        "grad_sft": lambda rows: losses.sft_loss(rows, y),
        "grad_entropy": lambda rows: losses.entropy_loss(rows, 0.7),
        "grad_entropy_top_fraction": lambda rows: losses.entropy_loss(rows, 0.7, top_fraction=0.25),
        "grad_kl_to_base": lambda rows: losses.kl_to_base_loss(rows, base, 0.7),
        "grad_sed": lambda rows: losses.sed_loss(rows, t_rows, taus, y),
    }
    for name, fn in cases.items():
        _, analytic = fn(z)
        fd = oracles.finite_difference_grad(lambda rows: fn(rows)[0], z)
        records.append(_record(name, 1e-4, oracles.relative_error(analytic, fd)))

    cfg = model.ModelConfig(vocab_size=11, context_len=8, d_model=16, n_layers=2,
                            n_heads=2, seed=seed, head_init="normal")
    params = model.init_params(cfg)
    tokens = rng.integers(0, cfg.vocab_size, size=(2, 7))
    targets = rng.integers(0, cfg.vocab_size, size=(2, 6))

    def model_loss(p):
        logits = model.forward(p, tokens, cfg)
        rows = logits[:, :-1, :].reshape(-1, cfg.vocab_size)
        value, _ = losses.sft_loss(rows, targets.reshape(-1))
        return value

    logits, cache = model.forward_with_cache(params, tokens, cfg)
    rows = logits[:, :-1, :].reshape(-1, cfg.vocab_size)
    _, grad_rows = losses.sft_loss(rows, targets.reshape(-1))
    upstream = np.zeros_like(logits)
    upstream[:, :-1, :] = grad_rows.reshape(2, 6, cfg.vocab_size)
    grads = model.backward_from_cache(params, cache, upstream, cfg)

    coords = []
    names = sorted(params)
    for _ in range(120):
        name = names[int(rng.integers(0, len(names)))]
        coords.append((name, int(rng.integers(0, params[name].size))))
    fd = oracles.finite_difference_grad_params(model_loss, params, coords)
    analytic = [grads[name].reshape(-1)[idx] for name, idx in coords]
    records.append(_record("grad_model_end_to_end", 1e-3,
                           oracles.relative_error(analytic, fd), coords=len(coords)))
    return records


def check_gate() -> list[dict]:
    """The increment gate: exact half value at the pivot, monotone, saturating."""
    gate = GateConfig()
    at_pivot = entropy_increment(gate.pivot, gate)
    exact_gap = abs(at_pivot - gate.max_increment / 2.0)
    grid = np.linspace(0.0, 10.0, 2001)
    vals = entropy_increment(grid, gate)
    worst_nonincrease = max(0.0, float(-(np.diff(vals)).min()))
    low = float(entropy_increment(0.0, gate))
    high = float(entropy_increment(10.0, gate))
    limit_gap = max(low - 0.05, abs(high - gate.max_increment))
    return [
        _record("gate_half_at_pivot", 0.0, exact_gap),
        _record("gate_strictly_increasing", 0.0, worst_nonincrease),
        _record("gate_saturates_at_limits", 1e-6, max(0.0, limit_gap),
                at_zero=low, at_ten=high),
    ]


def check_ema(seed: int = 0) -> list[dict]:
    """EMA sync arithmetic is exact; off-sync steps leave the teacher bitwise
    unchanged."""
    rng = np.random.default_rng(seed)
    student = {"a": rng.normal(size=(4, 5)), "b": rng.normal(size=7)}
    state = teacher.init_teacher(student, sync_every_n=5, decay_mu=0.99)
    old = {k: v.copy() for k, v in state.params.items()}
    moved = {k: v + rng.normal(size=v.shape) for k, v in student.items()}

    worst_drift = 0.0
    for step in range(1, 5):
        teacher.maybe_sync(state, moved, step)
        for k in old:
            if not np.array_equal(state.params[k], old[k]):
                worst_drift = 1.0
    teacher.maybe_sync(state, moved, 5)
    mu = state.decay_mu
    worst_sync = 0.0
    for k in old:
        expected = (1.0 - mu) * old[k] + mu * moved[k]
        worst_sync = max(worst_sync, float(np.max(np.abs(state.params[k] - expected))))
    return [
        _record("ema_constant_between_syncs", 0.0, worst_drift),
        _record("ema_sync_arithmetic_exact", 0.0, worst_sync),
    ]


SUITES = {
    "monotonicity": check_monotonicity,
    "identity": check_identity,
    "search": check_search,
    "projection": check_projection,
    "gradients": check_gradients,
    "gate": check_gate,
    "ema": check_ema,
}


def run_suites(only=None) -> list[dict]:
    selected = list(SUITES) if not only else list(only)
    unknown = [name for name in selected if name not in SUITES]
    if unknown:
        raise ValueError(f"unknown verification suites {unknown}; "
                         f"available: {sorted(SUITES)}")
    records = []
    for name in selected:
        records.extend(SUITES[name]())
    return records
