"""AdamW with decoupled weight decay, plus the cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteError, ShapeError


@dataclass
class AdamWState:
    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_init(params: dict, lr: float, weight_decay: float = 0.0,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamWState:
    state = AdamWState(lr=lr, weight_decay=weight_decay, beta1=beta1,
                       beta2=beta2, eps=eps)
    for name, p in params.items():
        state.m[name] = np.zeros_like(p)
        state.v[name] = np.zeros_like(p)
    return state


def adamw_step(state: AdamWState, params: dict, grads: dict) -> None:
    """One bias-corrected update, in place on the arrays in ``params``."""
    for name in state.m:
        g = grads[name]
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"adamw: grad shape {g.shape} != param {p.shape} for {name}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"adamw: non-finite gradient for {name}")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name in state.m:
        g = grads[name]
        p = params[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if state.weight_decay:
            p -= state.lr * state.weight_decay * p
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def cosine_lr(step: int, total_steps: int, lr_init: float, lr_min: float) -> float:
    """Half-cosine decay from lr_init at step 0 to lr_min at total_steps."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"cosine_lr: step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))
