"""Bias-corrected Adam with optional per-entry freezing."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from ..errors import ShapeError


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return AdamState(
            self.lr, self.beta1, self.beta2, self.eps, self.step,
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
        )


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
              update_masks: Optional[Mapping[str, np.ndarray]] = None):
    """One Adam update. Returns ``(new_params, new_state)``; inputs are not modified.

    ``update_masks`` maps a parameter name to a boolean array broadcastable
    to its shape. Entries where the mask is False keep their value and their
    moment estimates untouched for this step, which is how unrouted dense
    weights are held constant.
    """
    new = state.copy()
    new.step += 1
    bc1 = 1.0 - new.beta1 ** new.step
    bc2 = 1.0 - new.beta2 ** new.step
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m0 = new.m.get(name, np.zeros_like(p))
        v0 = new.v.get(name, np.zeros_like(p))
        m1 = new.beta1 * m0 + (1.0 - new.beta1) * g
        v1 = new.beta2 * v0 + (1.0 - new.beta2) * (g * g)
        p1 = p - new.lr * (m1 / bc1) / (np.sqrt(v1 / bc2) + new.eps)
        keep = None if update_masks is None else update_masks.get(name)
        if keep is not None:
            m1 = np.where(keep, m1, m0)
            v1 = np.where(keep, v1, v0)
            p1 = np.where(keep, p1, p)
        new.m[name], new.v[name], out[name] = m1, v1, p1
    return out, new
