"""Independent solver for the entropy-constrained KL projection.

Problem: given a full-support categorical p and an entropy increase delta,

    minimize   KL(q || p)
    subject to H(q) >= H(p) + delta,  q on the simplex.

The solver is a multiplier method: for a frozen entropy multiplier the inner
problem is minimized by exponentiated gradient descent on the simplex, and
the multiplier itself is driven by bisection on the (monotone) entropy gap.
It deliberately never uses temperature scaling: it exists to check, from the
outside, that the optimum coincides with the temperature-scaled distribution
whose entropy matches the target. Keep it free of imports from the
distribution module; a test audits that independence.

Intended for small vocabularies (<= 16); instances solve in milliseconds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ProjectionResult:
    q: np.ndarray              # the solved distribution
    kl_to_base: float
    entropy: float
    target_entropy: float
    multiplier: float          # entropy-constraint multiplier at the solution
    kkt_residual: float        # max of |constraint gap| and stationarity norm
    iterations: int


def _normalize_log(u: np.ndarray) -> np.ndarray:
    w = u - u.max()
    e = np.exp(w)
    return e / e.sum()


def _entropy(q: np.ndarray) -> float:
    mask = q > 0
    return float(-(q[mask] * np.log(q[mask])).sum())


def _kl(q: np.ndarray, p: np.ndarray) -> float:
    mask = q > 0
    return float((q[mask] * np.log(q[mask] / p[mask])).sum())


def constrained_projection_solve(
    base_probs,
    delta: float,
    tol: float = 1e-8,
    max_outer: int = 200,
    max_inner: int = 300,
) -> ProjectionResult:
    """Solve the projection problem to a KKT residual of `tol`.

    Raises ValueError when the target entropy is infeasible (>= log V) or
    the base distribution is degenerate.
    """
    p = np.asarray(base_probs, dtype=np.float64)
    if p.ndim != 1 or p.shape[0] < 2:
        raise ValueError(f"base must be a 1-D distribution, got shape {p.shape}")
    if p.shape[0] > 16:
        raise ValueError("projection oracle is capped at vocab 16")
    if np.any(p <= 0):
        raise ValueError("base must have full support")
    if abs(float(p.sum()) - 1.0) > 1e-9:
        raise ValueError("base must sum to 1")
    if delta < 0:
        raise ValueError(f"delta must be >= 0, got {delta}")

    vocab = p.shape[0]
    h_base = _entropy(p)
    h_target = h_base + float(delta)
    if h_target >= np.log(vocab) - 1e-12:
        raise ValueError(
            f"target entropy {h_target:.6f} infeasible for vocab {vocab} "
            f"(max {np.log(vocab):.6f})"
        )

    log_p = np.log(p)
    counter = [0]

    def inner_solve(lam: float, u_start: np.ndarray) -> np.ndarray:
        """Minimize KL(q||p) - lam * H(q) by exponentiated gradient.

        The multiplicative update contracts log q toward the optimum at a
        fixed geometric rate, so a few dozen iterations reach tolerance.
        """
        u = u_start.copy()
        eta = 0.5 / (1.0 + lam)
        for _ in range(max_inner):
            counter[0] += 1
            q = _normalize_log(u)
            ln_q = np.log(q)
            grad = (ln_q - log_p + 1.0) + lam * (ln_q + 1.0)
            tangent = q * (grad - float(q @ grad))
            if float(np.max(np.abs(tangent))) <= 0.05 * tol:
                break
            u = u - eta * grad
            u -= u.max()  # keep the free weights bounded
        return u

    # The entropy of the inner optimum is monotone increasing in the
    # multiplier, so bracket it and bisect on the entropy gap.
    u = inner_solve(0.0, log_p)
    gap0 = _entropy(_normalize_log(u)) - h_target
    if gap0 >= -tol:
        lam = 0.0  # constraint already satisfied at the unconstrained optimum
    else:
        lam_lo, lam_hi = 0.0, 1.0
        u_hi = inner_solve(lam_hi, u)
        while _entropy(_normalize_log(u_hi)) < h_target:
            lam_lo = lam_hi
            lam_hi *= 2.0
            if lam_hi > 1e8:
                raise RuntimeError("multiplier bracket failed to close")
            u_hi = inner_solve(lam_hi, u_hi)
        u = u_hi
        lam = lam_hi
        for _ in range(max_outer):
            mid = 0.5 * (lam_lo + lam_hi)
            u = inner_solve(mid, u)
            gap = _entropy(_normalize_log(u)) - h_target
            lam = mid
            if abs(gap) <= 0.5 * tol:
                break
            if gap < 0:
                lam_lo = mid
            else:
                lam_hi = mid

    u = inner_solve(lam, u)
    q = _normalize_log(u)
    gap = _entropy(q) - h_target
    ln_q = np.log(q)
    grad = (ln_q - log_p + 1.0) + lam * (ln_q + 1.0)
    stat = float(np.max(np.abs(q * (grad - float(q @ grad)))))
    return ProjectionResult(
        q=q,
        kl_to_base=_kl(q, p),
        entropy=_entropy(q),
        target_entropy=h_target,
        multiplier=lam,
        kkt_residual=max(stat, abs(gap) if delta > 0 else max(0.0, -gap)),
        iterations=counter[0],
    )
