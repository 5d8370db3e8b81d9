"""Adaptive-moment (Adam) parameter updates as a pure function."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .params import ParamSet


@dataclass(frozen=True)
class OptimState:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Mapping[str, np.ndarray] = field(default_factory=dict)
    v: Mapping[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamSet, **hyper) -> "OptimState":
        zeros = {k: np.zeros_like(a) for k, a in params.items()}
        return cls(m=zeros, v={k: z.copy() for k, z in zeros.items()}, **hyper)


def adam_update(params: ParamSet, grads: Mapping[str, object], state: OptimState) -> tuple[ParamSet, OptimState]:
    """One bias-corrected Adam step. Inputs are not modified."""
    missing = [k for k in params if k not in grads]
    if missing:
        raise KeyError(f"no gradient for parameter(s): {', '.join(missing)}")
    t = state.step + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    new_p, new_m, new_v = [], {}, {}
    for name, p in params.items():
        g = grads[name]
        g = np.asarray(g.data if hasattr(g, "data") and not isinstance(g, np.ndarray) else g, dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        new_p.append((name, p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)))
        new_m[name], new_v[name] = m, v
    return ParamSet(new_p), replace(state, step=t, m=new_m, v=new_v)
