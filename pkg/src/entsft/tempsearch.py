"""Entropy-guided per-token temperature selection.

For each token position we compute a target entropy increase through a
sigmoid gate on the current entropy, then solve for the teacher temperature
whose top-k entropy matches the target. Entropy is monotone non-decreasing
in temperature, so a bracketed bisection always converges; the batched
solver runs every row through the same lock-step iteration schedule so that
batch results are bit-identical to per-row calls.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dist import entropy_from_logit_rows, entropy_topk_rows


@dataclass
class GateConfig:
    """Sigmoid gate mapping token entropy to a target entropy increment."""

    max_increment: float = 0.5  # ceiling on the per-token increment (nats)
    sharpness: float = 2.0      # slope of the gate on the entropy axis
    pivot: float = 1.2          # entropy (nats) where the gate is at half strength

    def __post_init__(self):
        if self.max_increment <= 0:
            raise ValueError(f"max_increment must be > 0, got {self.max_increment}")
        if self.sharpness <= 0:
            raise ValueError(f"sharpness must be > 0, got {self.sharpness}")
        if self.pivot < 0:
            raise ValueError(f"pivot must be >= 0, got {self.pivot}")


@dataclass
class TempSearchConfig:
    """Bracket and stopping rule for the per-token temperature search."""

    tau_min: float = 1.1
    tau_max: float = 1.5
    epsilon: float = 1e-3  # entropy-matching tolerance (nats)
    max_iters: int = 30
    top_k: int = 512

    def __post_init__(self):
        if not 1.0 < self.tau_min < self.tau_max:
            raise ValueError(
                f"need 1 < tau_min < tau_max, got [{self.tau_min}, {self.tau_max}]"
            )
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.top_k < 2:
            raise ValueError(f"top_k must be >= 2, got {self.top_k}")


@dataclass
class TokenTempPlan:
    """Per-position record of the solved teacher temperature."""

    base_entropy: float     # top-k entropy at tau=1 (nats)
    increment: float        # requested entropy increase (nats)
    solved_tau: float
    target_entropy: float
    achieved_entropy: float
    clamped: bool


class TemperatureSearchError(RuntimeError):
    """Bisection failed to reach tolerance on an unclamped row."""

    def __init__(self, row_indices, residuals):
        self.row_indices = list(row_indices)
        self.residuals = list(residuals)
        worst = max(self.residuals)
        super().__init__(
            f"temperature search missed tolerance on rows {self.row_indices} "
            f"(max residual {worst:.3e} nats)"
        )


def sigmoid(x):
    """Numerically stable logistic function (scalar or array)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.where(
        x >= 0,
        1.0 / (1.0 + np.exp(-np.abs(x))),
        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))),
    )
    return out if out.ndim else float(out)


def entropy_increment(base_entropy, gate: GateConfig):
    """Target entropy increase: max_increment * sigmoid(sharpness * (H - pivot)).

    Strictly increasing in the base entropy; saturates at max_increment.
    Accepts a scalar or an array of entropies.
    """
    return gate.max_increment * sigmoid(gate.sharpness * (np.asarray(base_entropy, dtype=np.float64) - gate.pivot))


def _validate_rows(rows) -> np.ndarray:
    z = np.asarray(rows, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] < 2:
        raise ValueError(f"expected an (N, V>=2) logit matrix, got shape {z.shape}")
    finite = np.isfinite(z).all(axis=-1)
    if not finite.all():
        bad = np.flatnonzero(~finite)
        raise ValueError(f"non-finite logits in rows {bad.tolist()}")
    return z


def _solve_targets(rows: np.ndarray, targets: np.ndarray, cfg: TempSearchConfig,
                   base: np.ndarray) -> list[TokenTempPlan]:
    """Lock-step bisection for tau on each row's top-k entropy curve.

    Every row performs exactly cfg.max_iters halvings of its own bracket,
    so the result is independent of how rows are grouped into batches.
    """
    if not np.all(np.isfinite(targets)):
        bad = np.flatnonzero(~np.isfinite(targets))
        raise ValueError(f"non-finite target entropies in rows {bad.tolist()}")

    n, vocab = rows.shape
    k = min(cfg.top_k, vocab)
    idx = np.argsort(-rows, axis=-1, kind="stable")[:, :k]
    sub = np.take_along_axis(rows, idx, axis=-1)

    h_lo = entropy_from_logit_rows(sub, cfg.tau_min)
    h_hi = entropy_from_logit_rows(sub, cfg.tau_max)
    clamp_hi = targets > h_hi
    clamp_lo = targets < h_lo
    active = ~(clamp_hi | clamp_lo)

    lo = np.full(n, cfg.tau_min)
    hi = np.full(n, cfg.tau_max)
    for _ in range(cfg.max_iters):
        mid = 0.5 * (lo + hi)
        h_mid = entropy_from_logit_rows(sub, mid)
        go_up = h_mid < targets
        lo = np.where(active & go_up, mid, lo)
        hi = np.where(active & ~go_up, mid, hi)

    tau = 0.5 * (lo + hi)
    tau = np.where(clamp_hi, cfg.tau_max, tau)
    tau = np.where(clamp_lo, cfg.tau_min, tau)
    achieved = entropy_from_logit_rows(sub, tau)
    achieved = np.where(clamp_hi, h_hi, achieved)
    achieved = np.where(clamp_lo, h_lo, achieved)

    residual = np.abs(achieved - targets)
    missed = active & (residual > cfg.epsilon)
    if missed.any():
        bad = np.flatnonzero(missed)
        raise TemperatureSearchError(bad.tolist(), residual[bad].tolist())

    clamped = clamp_hi | clamp_lo
    return [
        TokenTempPlan(
            base_entropy=float(base[i]),
            increment=float(targets[i] - base[i]),
            solved_tau=float(tau[i]),
            target_entropy=float(targets[i]),
            achieved_entropy=float(achieved[i]),
            clamped=bool(clamped[i]),
        )
        for i in range(n)
    ]


def solve_temperature(logits, target_entropy: float, cfg: TempSearchConfig) -> TokenTempPlan:
    """Solve for the tau in [tau_min, tau_max] whose top-k entropy matches
    target_entropy within cfg.epsilon; clamp to the nearest endpoint when the
    target lies outside the reachable entropy range."""
    row = np.asarray(logits, dtype=np.float64)
    if row.ndim != 1:
        raise ValueError(f"expected a single logit row, got shape {row.shape}")
    rows = _validate_rows(row[None, :])
    base = entropy_topk_rows(rows, 1.0, cfg.top_k)
    return _solve_targets(rows, np.array([float(target_entropy)]), cfg, base)[0]


def solved_tau_array(plans) -> np.ndarray:
    """Convenience: per-row solved temperatures as a float64 vector."""
    return np.array([p.solved_tau for p in plans], dtype=np.float64)


def plan_batch(rows, gate: GateConfig, cfg: TempSearchConfig) -> list[TokenTempPlan]:
    """Per-row plans: base top-k entropy at tau=1, gated increment, solved tau.

    Equivalent to calling entropy_increment + solve_temperature row by row;
    the lock-step bisection makes the equivalence bit-exact on solved_tau.
    """
    z = _validate_rows(rows)
    base = entropy_topk_rows(z, 1.0, cfg.top_k)
    inc = entropy_increment(base, gate)
    targets = base + inc
    return _solve_targets(z, targets, cfg, base)
