"""EMA-synchronized teacher parameters.

The teacher is a full copy of the student's parameter arrays, refreshed
every `sync_every_n` optimizer steps with the blend

    teacher <- (1 - decay_mu) * teacher + decay_mu * student

Note the weighting: decay_mu multiplies the *student*, so the default
mu=0.99 keeps the teacher tracking the student closely; mu=0.01 would give
the conventional slow-moving average instead. In "shared" mode no copy is
kept at all and the teacher distribution is just the student's current
logits treated as constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class TeacherState:
    params: dict | None          # name -> array; None in shared mode
    sync_every_n: int = 5
    decay_mu: float = 0.99
    steps_since_sync: int = 0
    mode: str = "separate"       # "separate" or "shared"

    def __post_init__(self):
        if self.mode not in ("separate", "shared"):
            raise ValueError(f"mode must be 'separate' or 'shared', got {self.mode!r}")
        if self.sync_every_n < 1:
            raise ValueError(f"sync_every_n must be >= 1, got {self.sync_every_n}")
        if not 0.0 <= self.decay_mu <= 1.0:
            raise ValueError(f"decay_mu must be in [0, 1], got {self.decay_mu}")
        if self.mode == "shared" and self.params is not None:
            raise ValueError("shared mode must not materialize teacher params")


def init_teacher(student_params: dict, sync_every_n: int = 5, decay_mu: float = 0.99,
                 mode: str = "separate") -> TeacherState:
    """Start the teacher as an exact copy of the student (separate mode)."""
    if mode == "shared":
        return TeacherState(None, sync_every_n, decay_mu, 0, mode)
    params = {}
    for name, arr in student_params.items():
        a = np.asarray(arr)
        if not np.all(np.isfinite(a)):
            raise ValueError(f"student parameter {name!r} is non-finite")
        params[name] = a.copy()
    return TeacherState(params, sync_every_n, decay_mu, 0, mode)


def maybe_sync(state: TeacherState, student_params: dict, step: int) -> TeacherState:
    """Blend the teacher toward the student when step is a sync step.

    Steps count from 1; the sync fires when step % sync_every_n == 0.
    Off-sync steps return the state unchanged (same arrays, bit for bit).
    """
    if state.mode == "shared":
        return state
    if step % state.sync_every_n != 0:
        state.steps_since_sync += 1
        return state
    mu = state.decay_mu
    new_params = {}
    for name, teach in state.params.items():
        stud = np.asarray(student_params[name])
        if stud.shape != teach.shape:
            raise ValueError(
                f"shape mismatch for {name!r}: teacher {teach.shape} vs student {stud.shape}"
            )
        new_params[name] = (1.0 - mu) * teach + mu * stud
    state.params = new_params
    state.steps_since_sync = 0
    return state


def teacher_logits(state: TeacherState, inputs, forward_fn, student_logits=None) -> np.ndarray:
    """Teacher logits as a constant target.

    separate: forward pass with the teacher's own parameters.
    shared:   reuse the already-computed student logits (no extra forward);
              the copy severs any tie to the student's update.
    """
    if state.mode == "separate":
        return forward_fn(state.params, inputs)
    if student_logits is None:
        raise ValueError("shared mode needs the precomputed student logits")
    return np.array(student_logits, dtype=np.float64, copy=True)
