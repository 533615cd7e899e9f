"""Adam with global-norm clipping, operating on name -> ndarray parameter maps."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 5.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_global_norm(grads: dict, max_norm: float | None) -> dict:
    if max_norm is None:
        return grads
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


def adam_step(params: dict, grads: dict, state: AdamState,
              lr_scale: dict | None = None) -> tuple[dict, AdamState]:
    """One Adam update of the parameters named in ``grads``.

    Parameters absent from ``grads`` are returned untouched (same array object).
    ``lr_scale`` optionally maps a parameter name to a learning-rate multiplier.
    """
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape "
                             f"{params[name].shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            bad = int(np.sum(~np.isfinite(g)))
            raise FloatingPointError(
                f"non-finite gradient for parameter {name!r} ({bad} entries) at step {state.step + 1}")

    grads = clip_by_global_norm(grads, state.clip_norm)
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    out = dict(params)
    for name, g in grads.items():
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        lr = state.lr * (lr_scale.get(name, 1.0) if lr_scale else 1.0)
        out[name] = params[name] - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out, state
