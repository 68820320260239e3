"""Brute-force verification oracles.

These are deliberately naive, independent computations used as ground truth
by the test suite and the `verify` CLI command: dense temperature sweeps of
the entropy curve, and central-difference gradient estimates. The simplex
projection oracle lives in `projection` and stays independent of the
temperature-scaling code paths by construction.
"""

from __future__ import annotations

import numpy as np

from .dist import entropy, softmax_temp


def dense_temperature_sweep(logits, tau_grid) -> np.ndarray:
    """Exact full-vocabulary entropy at every temperature in the grid.

    Returns an (len(grid), 2) array of (tau, entropy) rows. The grid must be
    sorted ascending; for a non-constant logit row the entropy column is
    then non-decreasing, which is what the monotonicity audits check.
    """
    grid = np.asarray(tau_grid, dtype=np.float64)
    if grid.ndim != 1 or grid.shape[0] < 1:
        raise ValueError("tau grid must be a non-empty 1-D array")
    if np.any(np.diff(grid) < 0):
        raise ValueError("tau grid must be sorted ascending")
    rows = np.empty((grid.shape[0], 2))
    for i, tau in enumerate(grid):
        rows[i, 0] = tau
        rows[i, 1] = entropy(softmax_temp(logits, float(tau)))
    return rows


def entropy_slope(logits, tau: float) -> float:
    """Analytic dH/dtau = Var_p[z] / tau^3 for the tempered softmax."""
    p = softmax_temp(logits, tau).probs
    z = np.asarray(logits, dtype=np.float64)
    mean = float((p * z).sum())
    var = float((p * (z - mean) ** 2).sum())
    return var / tau ** 3


def finite_difference_grad(loss_fn, point, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of one array."""
    x = np.array(point, dtype=np.float64)
    if step <= 0:
        raise ValueError(f"step must be > 0, got {step}")
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.shape[0]):
        orig = flat[i]
        flat[i] = orig + step
        hi = loss_fn(x)
        flat[i] = orig - step
        lo = loss_fn(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def finite_difference_grad_params(loss_fn, params: dict, coords, step: float = 1e-5) -> list[float]:
    """Central differences through a dict of parameter arrays.

    coords is a list of (name, flat_index) pairs; returns one slope per
    coordinate. The params dict is restored after probing.
    """
    if step <= 0:
        raise ValueError(f"step must be > 0, got {step}")
    out = []
    for name, idx in coords:
        flat = params[name].reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + step
        hi = loss_fn(params)
        flat[idx] = orig - step
        lo = loss_fn(params)
        flat[idx] = orig
        out.append((hi - lo) / (2.0 * step))
    return out


def relative_error(estimate, reference) -> float:
    """Norm-wise relative error ||a - b|| / max(||a||, ||b||, tiny)."""
    a = np.asarray(estimate, dtype=np.float64).reshape(-1)
    b = np.asarray(reference, dtype=np.float64).reshape(-1)
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), 1e-300)
    return float(np.linalg.norm(a - b)) / denom
