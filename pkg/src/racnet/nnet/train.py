"""Minibatch training loop."""

from __future__ import annotations

import logging
from typing import Optional

import numpy as np

from .model import RacnetModel, _labels, batch_loss_and_grad, pad_batch
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)

DEFAULT_LR = 1e-4


def routed_dense_rows(masks: np.ndarray, d_rnn: int) -> np.ndarray:
    """Boolean ``(t * d_rnn, 1)`` selector of dense-weight rows fed by any routed position in the batch."""
    routed = masks.max(axis=0) > 0
    return np.repeat(routed, d_rnn)[:, None]


def train(m: RacnetModel, ds, epochs: int, batch_size: int = 5, seed: int = 0,
          lr: float = DEFAULT_LR, selective: bool = True, state: Optional[AdamState] = None):
    """Train with Adam on softmax cross-entropy.

    Each epoch shuffles with a stream keyed on ``(seed, epoch)``. With
    ``selective`` on, dense-weight rows belonging to positions that no
    volume in the batch routes are frozen for that step (value and Adam
    moments alike).

    Returns ``(model, history)``; the input model is not modified. History
    rows hold the epoch's mean batch loss and the accuracy of the
    predictions made during the epoch, before each batch's update.
    """
    volumes = list(ds)
    cfg = m.config
    model = m.copy()
    history = []
    if epochs <= 0 or not volumes:
        return model, history

    y = _labels(volumes)
    X, masks = pad_batch(cfg, volumes)
    state = state.copy() if state is not None else AdamState(lr=lr)
    params = model.params
    n = len(volumes)
    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch]).permutation(n)
        drop_rng = np.random.default_rng([seed, epoch, 1]) if cfg.keep_prob < 1 else None
        losses, correct = [], 0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            loss, grads, out = batch_loss_and_grad(params, cfg, X[idx], masks[idx], y[idx], rng=drop_rng)
            frozen = {"dense_w": routed_dense_rows(masks[idx], cfg.d_rnn)} if selective and cfg.masked else None
            params, state = adam_step(params, grads, state, frozen)
            losses.append(loss * len(idx))
            correct += int(np.sum(out["probs"].argmax(axis=1) == y[idx]))
        row = {"epoch": epoch + 1, "loss": float(np.sum(losses) / n), "accuracy": correct / n}
        log.info("epoch %d loss %.5f acc %.4f", row["epoch"], row["loss"], row["accuracy"])
        history.append(row)
    model.params = params
    return model, history
