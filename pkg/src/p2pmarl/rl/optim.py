from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .networks import Params

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class AdamState:
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Params) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()}, 0)

    def copy(self) -> "AdamState":
        return AdamState({k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()}, self.t)


def adam_step(params: Params, grads: Params, moments: AdamState, lr: float, t: int) -> tuple[Params, AdamState]:
    """One bias-corrected Adam descent step; returns new params and moments.

    Keys without a gradient are left untouched.
    """
    if t < 1:
        raise ValueError("Adam step count starts at 1")
    new_params = dict(params)
    m_new = dict(moments.m)
    v_new = dict(moments.v)
    c1 = 1.0 - BETA1**t
    c2 = 1.0 - BETA2**t
    for key, g in grads.items():
        m = BETA1 * moments.m[key] + (1.0 - BETA1) * g
        v = BETA2 * moments.v[key] + (1.0 - BETA2) * g * g
        m_new[key] = m
        v_new[key] = v
        new_params[key] = params[key] - lr * (m / c1) / (np.sqrt(v / c2) + EPS)
    return new_params, AdamState(m_new, v_new, t)
