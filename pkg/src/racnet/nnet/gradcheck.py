"""Central finite-difference check of the analytic gradients.

The finite-difference side evaluates the forward pass in extended precision
(``np.longdouble``) so that roundoff in the loss does not swamp gradient
entries of order 1e-8. If the +/- perturbation of an entry flips the sign of
any ReLU pre-activation, the difference straddles a kink and is not a valid
oracle there; the step for that entry is shrunk by 10x (up to three times)
until both sides sit on the same linear piece.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from ..errors import ConfigError
from .model import RacnetModel, batch_loss_and_grad, forward_batch, pad_batch

_KINK_RETRIES = 3


def numeric_grad(loss_fn, param: np.ndarray, step: float) -> np.ndarray:
    """Plain central differences of a zero-argument ``loss_fn`` w.r.t. ``param`` (perturbed in place)."""
    g = np.zeros(param.shape)
    flat = param.reshape(-1)
    out = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        up = loss_fn()
        flat[i] = old - step
        down = loss_fn()
        flat[i] = old
        out[i] = (up - down) / (2 * step)
    return g


def _extended_loss(params, cfg, X, masks, y):
    cache = {}
    out = forward_batch(params, cfg, X, masks, cache=cache)
    signs = (cache["conv_pre"] > 0, cache["dense_pre"] > 0)
    # keep the loss in extended precision (cross_entropy() rounds to float)
    return -np.mean(np.log(out["probs"][np.arange(len(y)), y])), signs


def _same(a, b) -> bool:
    return all(np.array_equal(p, q) for p, q in zip(a, b))


def fd_gradients(m: RacnetModel, X, masks, y, step: float) -> dict[str, np.ndarray]:
    params = {k: v.astype(np.longdouble) for k, v in m.params.items()}
    Xl = X.astype(np.longdouble)
    _, base_signs = _extended_loss(params, m.config, Xl, masks, y)
    grads = {}
    for name, p in params.items():
        g = np.zeros(p.shape)
        flat, out = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            h = np.longdouble(step)
            for _ in range(_KINK_RETRIES + 1):
                flat[i] = old + h
                up, s_up = _extended_loss(params, m.config, Xl, masks, y)
                flat[i] = old - h
                down, s_down = _extended_loss(params, m.config, Xl, masks, y)
                flat[i] = old
                if _same(s_up, base_signs) and _same(s_down, base_signs):
                    break
                h = h / 10
            out[i] = float((up - down) / (2 * h))
        grads[name] = g
    return grads


def grad_check(m: RacnetModel, volume, fd_step: float = 1e-5, tol: Optional[float] = None,
               label: Optional[int] = None, per_param: bool = False):
    """Max relative error ``|a - n| / max(|a|, |n|, 1e-8)`` over all parameters.

    Raises AssertionError when ``tol`` is given and the error reaches it.
    With ``per_param`` also returns the per-tensor maxima.
    """
    if m.config.keep_prob < 1:
        raise ConfigError("grad_check needs dropout disabled (keep_prob = 1)")
    cfg = m.config
    if label is None:
        label = volume.label if volume.label is not None else 1
    y = np.array([label])
    X, masks = pad_batch(cfg, [volume])
    _, analytic, _ = batch_loss_and_grad(m.params, cfg, X, masks, y)
    numeric = fd_gradients(m, X, masks, y, fd_step)

    errors = {}
    for name, a in analytic.items():
        n = numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        errors[name] = float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
    worst = max(errors.values())
    if tol is not None and not worst < tol:
        raise AssertionError(f"gradient check failed: max relative error {worst:.3e} >= {tol:g} ({errors})")
    return (worst, errors) if per_param else worst
