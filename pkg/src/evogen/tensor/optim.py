"""Gradient clipping and ADAM over flat ``{path: array}`` parameter dicts."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))


def clip_by_global_norm(grads: dict[str, np.ndarray], bound: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients by ``bound / norm`` when the global L2 norm exceeds ``bound``.

    Returns the (possibly scaled) gradients and the pre-clip norm.
    """
    if bound <= 0:
        raise ValueError("clip bound must be positive")
    norm = global_norm(grads)
    if norm <= bound:
        return dict(grads), norm
    scale = bound / norm
    return {k: g * scale for k, g in grads.items()}, norm


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-6):
    """One bias-corrected ADAM update; returns new params and new state (inputs untouched)."""
    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {k!r} {p.shape}")
        m = beta1 * state.m.get(k, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(k, 0.0) + (1.0 - beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_params[k] = (p - update).astype(p.dtype, copy=False)
        new_m[k] = m
        new_v[k] = v
    return new_params, AdamState(t, new_m, new_v)
