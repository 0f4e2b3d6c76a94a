"""AdamW with decoupled weight decay, and the exponential learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


def lr_at(epoch: int, lr0: float, gamma: float) -> float:
    return lr0 * gamma**epoch


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = EPS


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamWState,
               lr: float, weight_decay: float, no_decay: tuple[str, ...] = ("rho",)):
    """One in-place AdamW update of every tensor in ``params``.

    Decay ``theta -= lr * wd * theta`` is applied before the Adam delta and is
    skipped for names in ``no_decay``. Returns ``(params, state)``.
    """
    for name, g in grads.items():
        bad = ~np.isfinite(g)
        if np.any(bad):
            idx = tuple(int(i) for i in np.argwhere(bad)[0])
            raise NumericError(f"non-finite gradient in {name} at index {idx} (optimizer step {state.t + 1})",
                               step=state.t, tensor=name, index=idx)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, theta in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay and name not in no_decay:
            theta -= lr * weight_decay * theta
        theta -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state
