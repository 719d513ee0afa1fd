"""Adam with bias correction, plus global-norm gradient clipping."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..errors import DimensionError
from .core import GradientMap, Tensor


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float = 6e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-7):
    """One Adam update.  Returns ``(new_params, new_state)``; inputs are untouched.

    Parameters missing from ``grads`` are passed through unchanged and do not
    advance their moment estimates.
    """
    t = state.step + 1
    new_params, m_new, v_new = {}, dict(state.m), dict(state.v)
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new_params[name] = p
            continue
        if g.shape != p.shape:
            raise DimensionError(f"adam: grad {g.shape} does not match param {name} {p.shape}")
        m = beta1 * state.m.get(name, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1.0 - beta2) * g * g
        m_new[name], v_new[name] = m, v
        new_params[name] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return new_params, AdamState(t, m_new, v_new)


def clip_by_global_norm(grads: Mapping[str, np.ndarray], max_norm: float | None):
    """Scale ``grads`` so their joint L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return dict(grads), norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


class Adam:
    """Stateful wrapper that rebinds ``Tensor.data`` of named parameters.

    Rebinding (rather than writing into the old buffer) keeps earlier
    snapshots of the arrays intact.
    """

    def __init__(self, params: Mapping[str, Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-7, clip_norm: float | None = None):
        self.params = dict(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.clip_norm = clip_norm
        self.state = AdamState()

    def step(self, grads) -> float:
        """Apply gradients (a GradientMap or name->array dict); returns the pre-clip norm."""
        named = {}
        for name, p in self.params.items():
            g = grads.get(p) if isinstance(grads, GradientMap) else grads.get(name)
            if g is not None:
                named[name] = g
        named, norm = clip_by_global_norm(named, self.clip_norm)
        arrays = {n: p.data for n, p in self.params.items()}
        new, self.state = adam_step(arrays, named, self.state, self.lr, self.beta1, self.beta2, self.eps)
        for n, p in self.params.items():
            p.data = new[n]
        return norm
