"""Training objectives over raw logit rows, each with its analytic gradient.

All losses take an (N, V) matrix of student logits where each row is one
non-padding token position, plus whatever targets the objective needs. They
return (value, grad) with grad shaped like the logits. Values average over
positions; the combined objective is sft + alpha * regularizer.

Conventions:
  - the entropy regularizer is the *negative* entropy (minimizing it pushes
    entropy up), optionally restricted to the highest-entropy fraction of
    positions in the batch;
  - the KL regularizer is forward KL(student || frozen base) at tau=1;
  - the self-distillation regularizer is half the squared log-probability
    ratio between student and tempered teacher at the expert token, a
    low-variance single-sample KL surrogate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dist import entropy_rows, log_softmax_rows, softmax_rows
from .tempsearch import TokenTempPlan

REGULARIZER_KINDS = ("none", "entropy", "entropy_top_fraction", "kl_to_base", "sed")


@dataclass
class Regularizer:
    """Which regularizer a run uses, plus its knobs."""

    kind: str = "none"
    top_fraction: float = 0.2  # only used by entropy_top_fraction

    def __post_init__(self):
        if self.kind not in REGULARIZER_KINDS:
            raise ValueError(f"unknown regularizer kind {self.kind!r}; expected one of {REGULARIZER_KINDS}")
        if not 0.0 < self.top_fraction <= 1.0:
            raise ValueError(f"top_fraction must be in (0, 1], got {self.top_fraction}")


@dataclass
class LossBreakdown:
    """Combined objective split into its parts.

    `regularizer` is the unweighted regularizer value; total = sft + alpha *
    regularizer. per_token holds (position, sft_term, reg_term) tuples.
    """

    sft: float
    regularizer: float
    total: float
    alpha: float
    per_token: list = field(default_factory=list)


def _check_rows(rows, name="logits") -> np.ndarray:
    z = np.asarray(rows, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 1 or z.shape[1] < 2:
        raise ValueError(f"{name} must be (N>=1, V>=2), got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError(f"{name} contain non-finite values")
    return z


def _check_tokens(tokens, n: int, vocab: int) -> np.ndarray:
    y = np.asarray(tokens)
    if y.shape != (n,):
        raise ValueError(f"expected {n} expert tokens, got shape {y.shape}")
    y = y.astype(np.int64)
    if y.min() < 0 or y.max() >= vocab:
        raise ValueError(f"expert token out of range for vocab {vocab}")
    return y


def sft_loss(student_rows, expert_tokens):
    """Mean cross-entropy -log p(expert token); grad = (softmax - onehot)/N."""
    z = _check_rows(student_rows)
    n, vocab = z.shape
    y = _check_tokens(expert_tokens, n, vocab)
    logp = log_softmax_rows(z)
    per_token = -logp[np.arange(n), y]
    value = float(per_token.mean())
    grad = softmax_rows(z)
    grad[np.arange(n), y] -= 1.0
    grad /= n
    return value, grad


def entropy_loss(student_rows, alpha: float, top_fraction: float | None = None):
    """alpha * mean(sum p log p), i.e. alpha times the negative entropy.

    With top_fraction=f, only the ceil(f*N) highest-entropy positions
    contribute (ranking ties break toward lower position index); the
    selection itself is treated as constant for differentiation.
    """
    z = _check_rows(student_rows)
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    n, _ = z.shape
    p = softmax_rows(z)
    ent = entropy_rows(p)

    if top_fraction is None:
        selected = np.arange(n)
    else:
        if not 0.0 < top_fraction <= 1.0:
            raise ValueError(f"top_fraction must be in (0, 1], got {top_fraction}")
        count = max(1, int(np.ceil(top_fraction * n)))
        selected = np.argsort(-ent, kind="stable")[:count]

    m = selected.shape[0]
    value = float(alpha * (-ent[selected]).mean())

    grad = np.zeros_like(z)
    ps = p[selected]
    # d(-H)/dz_j = p_j * (log p_j + H); guard log of underflowed entries.
    safe = np.where(ps > 0, ps, 1.0)
    grad[selected] = ps * (np.log(safe) + ent[selected][:, None])
    grad *= alpha / m
    return value, grad


def kl_to_base_loss(student_rows, base_rows, alpha: float):
    """alpha * mean KL(student || base); the base rows are constants."""
    z = _check_rows(student_rows, "student logits")
    b = _check_rows(base_rows, "base logits")
    if z.shape != b.shape:
        raise ValueError(f"shape mismatch: student {z.shape} vs base {b.shape}")
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    n, _ = z.shape
    logp = log_softmax_rows(z)
    logq = log_softmax_rows(b)
    p = np.exp(logp)
    ratio = logp - logq
    kl = (p * ratio).sum(axis=-1)
    value = float(alpha * kl.mean())
    grad = alpha / n * p * (ratio - kl[:, None])
    return value, grad


def sed_loss(student_rows, teacher_rows, plans, expert_tokens, student_tau: float = 1.0):
    """Half the squared log-ratio between student (at student_tau) and the
    tempered teacher (at each plan's solved tau), evaluated at the expert
    token and averaged over positions. Teacher rows are constants."""
    z = _check_rows(student_rows, "student logits")
    t = _check_rows(teacher_rows, "teacher logits")
    if z.shape != t.shape:
        raise ValueError(f"shape mismatch: student {z.shape} vs teacher {t.shape}")
    n, vocab = z.shape
    y = _check_tokens(expert_tokens, n, vocab)
    if len(plans) != n:
        raise ValueError(f"expected {n} temperature plans, got {len(plans)}")
    if student_tau <= 0:
        raise ValueError(f"student_tau must be > 0, got {student_tau}")

    tau_hat = np.array(
        [p.solved_tau if isinstance(p, TokenTempPlan) else float(p) for p in plans],
        dtype=np.float64,
    )
    rows_idx = np.arange(n)
    logp_student = log_softmax_rows(z, student_tau)[rows_idx, y]
    logp_teacher = log_softmax_rows(t, tau_hat)[rows_idx, y]
    r = logp_student - logp_teacher
    value = float(0.5 * (r * r).mean())

    pi = softmax_rows(z, student_tau)
    grad = -pi * r[:, None]
    grad[rows_idx, y] += r
    grad /= student_tau * n
    return value, grad


def total_loss(
    student_rows,
    expert_tokens,
    regularizer: Regularizer,
    alpha: float = 1.0,
    *,
    base_rows=None,
    teacher_rows=None,
    plans=None,
    student_tau: float = 1.0,
):
    """Combine the SFT loss with exactly one regularizer.

    Returns (LossBreakdown, grad). Raises ValueError when the supplied
    side inputs do not match the requested regularizer (asking for more
    than one regularizer at a time is a configuration error).
    """
    z = _check_rows(student_rows)
    n, vocab = z.shape
    y = _check_tokens(expert_tokens, n, vocab)

    needs = {
        "none": (),
        "entropy": (),
        "entropy_top_fraction": (),
        "kl_to_base": ("base_rows",),
        "sed": ("teacher_rows", "plans"),
    }[regularizer.kind]
    given = {
        "base_rows": base_rows is not None,
        "teacher_rows": teacher_rows is not None,
        "plans": plans is not None,
    }
    for name in needs:
        if not given[name]:
            raise ValueError(f"regularizer {regularizer.kind!r} requires {name}")
    extras = [name for name, present in given.items() if present and name not in needs]
    if extras:
        raise ValueError(
            f"regularizer {regularizer.kind!r} does not take {extras}; "
            "configure exactly one regularizer"
        )

    sft_value, sft_grad = sft_loss(z, y)
    logp = log_softmax_rows(z)
    sft_terms = -logp[np.arange(n), y]

    reg_terms = np.zeros(n)
    if regularizer.kind == "none":
        reg_value, reg_grad = 0.0, np.zeros_like(z)
    elif regularizer.kind in ("entropy", "entropy_top_fraction"):
        frac = regularizer.top_fraction if regularizer.kind == "entropy_top_fraction" else None
        reg_value, reg_grad = entropy_loss(z, 1.0, top_fraction=frac)
        ent = entropy_rows(softmax_rows(z))
        if frac is None:
            reg_terms = -ent
        else:
            count = max(1, int(np.ceil(frac * n)))
            sel = np.argsort(-ent, kind="stable")[:count]
            reg_terms[sel] = -ent[sel]
    elif regularizer.kind == "kl_to_base":
        reg_value, reg_grad = kl_to_base_loss(z, base_rows, 1.0)
        p = softmax_rows(z)
        reg_terms = (p * (log_softmax_rows(z) - log_softmax_rows(np.asarray(base_rows, dtype=np.float64)))).sum(axis=-1)
    else:  # sed
        reg_value, reg_grad = sed_loss(z, teacher_rows, plans, y, student_tau)
        tau_hat = np.array(
            [p.solved_tau if isinstance(p, TokenTempPlan) else float(p) for p in plans],
            dtype=np.float64,
        )
        r = (
            log_softmax_rows(z, student_tau)[np.arange(n), y]
            - log_softmax_rows(np.asarray(teacher_rows, dtype=np.float64), tau_hat)[np.arange(n), y]
        )
        reg_terms = 0.5 * r * r

    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    total = sft_value + alpha * reg_value
    grad = sft_grad + alpha * reg_grad
    breakdown = LossBreakdown(
        sft=sft_value,
        regularizer=reg_value,
        total=total,
        alpha=alpha,
        per_token=[(i, float(sft_terms[i]), float(reg_terms[i])) for i in range(n)],
    )
    return breakdown, grad
