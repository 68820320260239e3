"""Distribution math over raw logit rows: tempered softmax, entropy, KL.

Everything here is pure and computes in float64 regardless of input dtype.
Entropies are in nats. Probabilities at or below 1e-300 are treated as exact
zeros inside entropy sums, so 0*log(0) contributes 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Probabilities at or below this are exact zeros for entropy purposes.
PROB_FLOOR = 1e-300

_SUM_TOL = 1e-9


@dataclass
class ProbDist:
    """A normalized categorical distribution tagged with the temperature
    that produced it."""

    probs: np.ndarray
    temperature: float
    renormalized_over: str = "full"  # "full" or "top_k(<k>)"

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 1:
            raise ValueError("probs must be a 1-D vector")
        if not (np.isfinite(self.temperature) and self.temperature > 0):
            raise ValueError(f"temperature must be finite and > 0, got {self.temperature}")
        if np.any(self.probs < 0):
            raise ValueError("probabilities must be non-negative")
        total = float(self.probs.sum())
        if abs(total - 1.0) > _SUM_TOL:
            raise ValueError(f"probabilities sum to {total!r}, expected 1 within {_SUM_TOL}")

    @property
    def vocab_size(self) -> int:
        return int(self.probs.shape[0])


def _check_logit_row(values) -> np.ndarray:
    row = np.asarray(values, dtype=np.float64)
    if row.ndim != 1:
        raise ValueError(f"logit row must be 1-D, got shape {row.shape}")
    if row.shape[0] < 2:
        raise ValueError("logit row needs vocab_size >= 2")
    if not np.all(np.isfinite(row)):
        raise ValueError("logits must be finite (no NaN/Inf)")
    return row


def _check_tau(tau: float) -> float:
    if not (np.isfinite(tau) and tau > 0):
        raise ValueError(f"temperature must be finite and > 0, got {tau}")
    return float(tau)


def softmax_temp(logits, tau: float) -> ProbDist:
    """Temperature-scaled softmax of one logit row, with max-subtraction."""
    row = _check_logit_row(logits)
    tau = _check_tau(tau)
    scaled = row / tau
    scaled -= scaled.max()
    e = np.exp(scaled)
    return ProbDist(e / e.sum(), temperature=tau)


def entropy(dist: ProbDist) -> float:
    """Shannon entropy -sum(p log p) in nats, with 0*log(0) := 0."""
    p = dist.probs
    mask = p > PROB_FLOOR
    pm = p[mask]
    return float(-(pm * np.log(pm)).sum())


def entropy_topk(logits, tau: float, k: int) -> float:
    """Entropy of the renormalized top-k-logit subset distribution.

    k is clamped to the vocab size; ties at the k-th logit break toward the
    lowest token index so the subset is deterministic.
    """
    row = _check_logit_row(logits)
    tau = _check_tau(tau)
    return float(entropy_topk_rows(row[None, :], tau, k)[0])


def kl_divergence(p: ProbDist, q: ProbDist) -> float:
    """KL(p || q) = sum p log(p/q). Requires q > 0 wherever p > 0."""
    if p.vocab_size != q.vocab_size:
        raise ValueError(f"vocab mismatch: {p.vocab_size} vs {q.vocab_size}")
    mask = p.probs > PROB_FLOOR
    if np.any(q.probs[mask] <= 0):
        raise ValueError("q has zero mass where p > 0 (support mismatch)")
    pm = p.probs[mask]
    return float((pm * np.log(pm / q.probs[mask])).sum())


def log_prob_at(logits, tau: float, token: int) -> float:
    """log softmax(logits/tau)[token], computed via log-sum-exp."""
    row = _check_logit_row(logits)
    tau = _check_tau(tau)
    token = int(token)
    if not 0 <= token < row.shape[0]:
        raise ValueError(f"token index {token} out of range for vocab {row.shape[0]}")
    scaled = row / tau
    m = scaled.max()
    return float(scaled[token] - m - np.log(np.exp(scaled - m).sum()))


# ---------------------------------------------------------------------------
# Batched variants over (N, V) logit matrices. These are the workhorses for
# the temperature search, the losses, and the trainer; the scalar API above
# routes through them where exact scalar/batch agreement matters.
# ---------------------------------------------------------------------------


def _as_tau_column(tau, n_rows: int) -> np.ndarray:
    t = np.asarray(tau, dtype=np.float64)
    if t.ndim == 0:
        t = np.full(n_rows, float(t))
    if t.shape != (n_rows,):
        raise ValueError(f"tau must be scalar or shape ({n_rows},), got {t.shape}")
    if not np.all(np.isfinite(t)) or np.any(t <= 0):
        raise ValueError("temperatures must be finite and > 0")
    return t[:, None]


def softmax_rows(logits, tau=1.0) -> np.ndarray:
    """Row-wise tempered softmax of an (N, V) matrix; tau scalar or (N,)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z / _as_tau_column(tau, z.shape[0])
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(logits, tau=1.0) -> np.ndarray:
    """Row-wise tempered log-softmax via log-sum-exp."""
    z = np.asarray(logits, dtype=np.float64)
    z = z / _as_tau_column(tau, z.shape[0])
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def entropy_rows(probs) -> np.ndarray:
    """Row-wise -sum(p log p) with the 0*log(0) := 0 convention."""
    p = np.asarray(probs, dtype=np.float64)
    safe = np.where(p > PROB_FLOOR, p, 1.0)  # log(1) = 0 at masked entries
    return -(np.where(p > PROB_FLOOR, p * np.log(safe), 0.0)).sum(axis=-1)


def entropy_from_logit_rows(logits, tau) -> np.ndarray:
    """Row-wise entropy of softmax(logits/tau) as logZ - E[z/tau].

    Algebraically equal to -sum(p log p) but never takes log of a
    probability, so it stays exact when the distribution is very peaked.
    """
    z = np.asarray(logits, dtype=np.float64)
    w = z / _as_tau_column(tau, z.shape[0])
    m = w.max(axis=-1, keepdims=True)
    e = np.exp(w - m)
    total = e.sum(axis=-1, keepdims=True)
    p = e / total
    log_z = np.log(total) + m
    return (log_z - (p * w).sum(axis=-1, keepdims=True))[:, 0]


def topk_indices_rows(logits, k: int) -> np.ndarray:
    """Indices of the k largest entries per row, ties toward lower index."""
    z = np.asarray(logits, dtype=np.float64)
    if k < 2:
        raise ValueError(f"top-k needs k >= 2, got {k}")
    k = min(k, z.shape[-1])
    # Stable sort of -z keeps the original (lower) index first among ties.
    return np.argsort(-z, axis=-1, kind="stable")[:, :k]


def entropy_topk_rows(logits, tau, k: int) -> np.ndarray:
    """Row-wise top-k entropy: renormalize the k largest logits, take entropy.

    The top-k subset is computed from the raw logits; positive temperature
    scaling preserves the order, so the subset is temperature-independent.
    """
    z = np.asarray(logits, dtype=np.float64)
    idx = topk_indices_rows(z, k)
    sub = np.take_along_axis(z, idx, axis=-1)
    return entropy_from_logit_rows(sub, tau)
