"""Adam optimizer and cosine learning-rate schedule for the fusion network."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    """Per-parameter first/second moment buffers plus the step counter."""

    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update, in place on `params`.

    params: list of engine Tensors (their .data is mutated);
    grads: matching list of numpy arrays (None entries are treated as zero).
    """
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(grads) != len(params):
        raise ValueError(f"adam_step: {len(grads)} grads for {len(params)} params")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"adam_step: grad shape {g.shape} vs param shape {p.data.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.data -= (lr * mhat / (np.sqrt(vhat) + state.epsilon)).astype(p.data.dtype)
    return params, state


@dataclass(frozen=True)
class CosineSchedule:
    """Cosine decay from lr_start at step 0 to lr_end at total_steps."""

    lr_start: float = 1e-3
    lr_end: float = 1e-5
    total_steps: int = 5000


def cosine_lr(schedule, step):
    """lr_end + 0.5 * (lr_start - lr_end) * (1 + cos(pi * step / total_steps))."""
    s = min(max(step, 0), schedule.total_steps)
    cosine = math.cos(math.pi * s / schedule.total_steps)
    return schedule.lr_end + 0.5 * (schedule.lr_start - schedule.lr_end) * (1.0 + cosine)
