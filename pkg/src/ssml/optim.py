"""Parameter update rules operating on ``name -> array`` dictionaries.

Updates return new dictionaries; the inputs are never modified in place.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Params = dict[str, np.ndarray]


def _check(params: Params, grads: Params) -> None:
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} shape {params[name].shape}")


def sgd_step(params: Params, grads: Params, lr: float) -> Params:
    """``theta - lr * g``; parameters without a gradient are copied unchanged."""
    _check(params, grads)
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        out[name] = p.copy() if g is None or lr == 0 else (p - p.dtype.type(lr) * g).astype(p.dtype, copy=False)
    return out


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)

    @classmethod
    def init(cls, params: Params, **hyper) -> "AdamState":
        state = cls(**hyper)
        state.m = {k: np.zeros_like(v) for k, v in params.items()}
        state.v = {k: np.zeros_like(v) for k, v in params.items()}
        return state


def adam_step(state: AdamState, params: Params, grads: Params) -> Params:
    """Bias-corrected Adam with decoupled weight decay applied before the Adam delta."""
    if not state.m and params:
        raise ValueError("AdamState is not initialised for these parameters; use AdamState.init")
    _check(params, grads)
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    out = {}
    for name, p in params.items():
        if name not in state.m:
            raise ValueError(f"AdamState has no moments for parameter {name!r}")
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * (g * g)
        denom = np.sqrt(v / c2)
        denom += state.eps
        delta = m / denom
        delta *= state.lr / c1
        new = p * (1 - state.lr * state.weight_decay) if state.weight_decay > 0 else p.copy()
        new -= delta
        out[name] = new.astype(p.dtype, copy=False)
    return out
