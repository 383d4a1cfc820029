"""Per-slice conv encoder -> GRU -> routing mask -> dense head -> softmax.

Everything runs on float64 numpy arrays with hand-written reverse-mode
gradients. The forward pass works on a batch of already padded volumes of
shape ``(B, t, h, w)`` together with a ``(B, t)`` routing mask; the
single-volume entry points below build the plan and padding first.

Parameter layout (row-vector convention, ``y = x @ W + b``)::

    conv_w  (3, 3, c)        conv_b  (c,)
    enc_w   (c, d_enc)       enc_b   (d_enc,)
    W_z, W_r, W_h (d_enc, d_rnn)
    U_z, U_r, U_h (d_rnn, d_rnn)
    b_z, b_r, b_h (d_rnn,)
    dense_w (t * d_rnn, d_dense)   dense_b (d_dense,)
    out_w   (d_dense, 2)     out_b   (2,)
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import CapacityError, ConfigError, DataError, ShapeError
from ..routing import ROUTING_MODES, AlignmentPlan, apply_plan, make_plan

GRU_GATES = ("z", "r", "h")


@dataclass(frozen=True)
class ModelConfig:
    t: int = 24
    h: int = 16
    w: int = 16
    channels: int = 4
    d_enc: int = 16
    d_rnn: int = 16
    d_dense: int = 32
    n_classes: int = 2
    routing: str = "aligned"
    mask: bool = True
    keep_prob: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("t", "h", "w", "channels", "d_enc", "d_rnn", "d_dense"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_classes != 2:
            raise ConfigError("only two-class models are supported")
        if self.routing not in ROUTING_MODES:
            raise ConfigError(f"routing must be one of {ROUTING_MODES}, got {self.routing!r}")
        if not 0 < self.keep_prob <= 1:
            raise ConfigError("keep_prob must lie in (0, 1]")

    @property
    def masked(self) -> bool:
        """Whether the routing mask is applied (mode ``none`` never masks)."""
        return self.mask and self.routing != "none"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    c, de, dr, dd = cfg.channels, cfg.d_enc, cfg.d_rnn, cfg.d_dense
    shapes = {"conv_w": (3, 3, c), "conv_b": (c,), "enc_w": (c, de), "enc_b": (de,)}
    for g in GRU_GATES:
        shapes[f"W_{g}"] = (de, dr)
        shapes[f"U_{g}"] = (dr, dr)
        shapes[f"b_{g}"] = (dr,)
    shapes.update(
        dense_w=(cfg.t * dr, dd),
        dense_b=(dd,),
        out_w=(dd, cfg.n_classes),
        out_b=(cfg.n_classes,),
    )
    return shapes


def _glorot(rng, fan_in, fan_out, shape):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases, deterministic in ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 1:
            params[name] = np.zeros(shape)
        elif name == "conv_w":
            params[name] = _glorot(rng, 9, 9 * shape[2], shape)
        else:
            params[name] = _glorot(rng, shape[0], shape[1], shape)
    return params


@dataclass
class RacnetModel:
    config: ModelConfig
    params: dict[str, np.ndarray] = field(default=None)

    def __post_init__(self):
        if self.params is None:
            self.params = init_params(self.config)
        shapes = param_shapes(self.config)
        if set(self.params) != set(shapes):
            raise ShapeError(f"parameter names {sorted(self.params)} do not match config")
        for name, shape in shapes.items():
            self.params[name] = np.asarray(self.params[name], dtype=np.float64)
            if self.params[name].shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {self.params[name].shape}")

    def copy(self) -> "RacnetModel":
        return RacnetModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def with_config(self, **changes) -> "RacnetModel":
        """Same weights under a modified config (shapes must stay compatible)."""
        return RacnetModel(replace(self.config, **changes), {k: v.copy() for k, v in self.params.items()})


# --- routing helpers ----------------------------------------------------------


def plan_for(cfg: ModelConfig, length: int) -> AlignmentPlan:
    if length > cfg.t:
        raise CapacityError(f"volume of {length} slices exceeds padded length t={cfg.t}")
    return make_plan(cfg.routing, length, cfg.t)


def route_mask(cfg: ModelConfig, plan: AlignmentPlan) -> np.ndarray:
    if cfg.masked:
        return plan.mask_array()
    return np.ones(plan.t)


def pad_volume(cfg: ModelConfig, volume) -> tuple[AlignmentPlan, np.ndarray, np.ndarray]:
    """Plan, padded ``(t, h, w)`` stack and ``(t,)`` route mask for one volume."""
    slices = getattr(volume, "slices", volume)
    if slices.shape[1:] != (cfg.h, cfg.w):
        raise ShapeError(f"slices are {slices.shape[1:]}, model expects {(cfg.h, cfg.w)}")
    plan = plan_for(cfg, slices.shape[0])
    return plan, apply_plan(slices, plan), route_mask(cfg, plan)


def pad_batch(cfg: ModelConfig, volumes: Sequence) -> tuple[np.ndarray, np.ndarray]:
    padded, masks = [], []
    for v in volumes:
        _, p, m = pad_volume(cfg, v)
        padded.append(p)
        masks.append(m)
    return np.stack(padded), np.stack(masks)


# --- forward / backward -------------------------------------------------------


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _patches(slices: np.ndarray) -> np.ndarray:
    """(N, h, w) -> (N, h, w, 9) zero-padded 3x3 neighbourhoods."""
    padded = np.pad(slices, ((0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(padded, (3, 3), axis=(1, 2))
    return win.reshape(slices.shape + (9,))


def encode(params, X: np.ndarray, cache: Optional[dict] = None) -> np.ndarray:
    """Encode ``(N, h, w)`` slices to ``(N, d_enc)`` features."""
    conv_w = params["conv_w"].reshape(9, -1)
    patches = _patches(X)
    pre = patches @ conv_w + params["conv_b"]
    act = np.maximum(pre, 0.0)
    pooled = act.mean(axis=(1, 2))
    out = pooled @ params["enc_w"] + params["enc_b"]
    if cache is not None:
        cache.update(patches=patches, conv_pre=pre, pooled=pooled)
    return out


def encode_slices(m: RacnetModel, padded: np.ndarray) -> np.ndarray:
    """Apply the encoder independently to each of the ``t`` padded slices."""
    padded = np.asarray(padded, dtype=np.float64)
    cfg = m.config
    if padded.shape != (cfg.t, cfg.h, cfg.w):
        raise ShapeError(f"padded volume must be {(cfg.t, cfg.h, cfg.w)}, got {padded.shape}")
    return encode(m.params, padded)


def gru(params, X: np.ndarray, cache: Optional[dict] = None) -> np.ndarray:
    """Run the GRU over ``(B, t, d_in)`` inputs from a zero state; returns ``(B, t, d_rnn)``."""
    B, t, _ = X.shape
    d = params["U_z"].shape[0]
    # input projections for all steps at once
    xz = X @ params["W_z"] + params["b_z"]
    xr = X @ params["W_r"] + params["b_r"]
    xh = X @ params["W_h"] + params["b_h"]
    dt = np.result_type(X, params["U_z"])
    H = np.empty((B, t, d), dtype=dt)
    Z = np.empty_like(H)
    R = np.empty_like(H)
    HT = np.empty_like(H)
    h = np.zeros((B, d), dtype=dt)
    for k in range(t):
        z = _sigmoid(xz[:, k] + h @ params["U_z"])
        r = _sigmoid(xr[:, k] + h @ params["U_r"])
        ht = np.tanh(xh[:, k] + (r * h) @ params["U_h"])
        h = (1.0 - z) * h + z * ht
        Z[:, k], R[:, k], HT[:, k], H[:, k] = z, r, ht, h
    if cache is not None:
        cache.update(gru_x=X, Z=Z, R=R, HT=HT, H=H)
    return H


def gru_forward(m: RacnetModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape != (m.config.t, m.config.d_enc):
        raise ShapeError(f"GRU input must be {(m.config.t, m.config.d_enc)}, got {X.shape}")
    return gru(m.params, X[None])[0]


def forward_batch(params, cfg: ModelConfig, X: np.ndarray, masks: np.ndarray,
                  rng: Optional[np.random.Generator] = None, cache: Optional[dict] = None) -> dict:
    """Forward pass on padded volumes ``X`` (B, t, h, w) with route masks (B, t).

    Dropout on the encoder features is applied only when ``rng`` is given and
    ``cfg.keep_prob < 1``.
    """
    B, t = X.shape[:2]
    c = {} if cache is None else cache
    enc = encode(params, X.reshape((B * t,) + X.shape[2:]), c)
    if rng is not None and cfg.keep_prob < 1.0:
        drop = (rng.random(enc.shape) < cfg.keep_prob) / cfg.keep_prob
        enc = enc * drop
        c["drop"] = drop
    seq = enc.reshape(B, t, -1)
    H = gru(params, seq, c)
    Hm = np.where(masks[:, :, None] > 0, H, 0.0)
    flat = Hm.reshape(B, -1)
    dense_pre = flat @ params["dense_w"] + params["dense_b"]
    latent = np.maximum(dense_pre, 0.0)
    logits = latent @ params["out_w"] + params["out_b"]
    probs = _softmax(logits)
    c.update(masks=masks, flat=flat, dense_pre=dense_pre, latent=latent, probs=probs)
    return {"features": seq, "H": H, "masked_concat": flat, "latent": latent, "logits": logits, "probs": probs}


def backward_batch(params, cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a scalar loss given ``dloss/dlogits`` (B, 2)."""
    g = {}
    latent, flat = cache["latent"], cache["flat"]
    g["out_w"] = latent.T @ dlogits
    g["out_b"] = dlogits.sum(axis=0)
    d_pre = (dlogits @ params["out_w"].T) * (cache["dense_pre"] > 0)
    g["dense_w"] = flat.T @ d_pre
    g["dense_b"] = d_pre.sum(axis=0)
    masks = cache["masks"]
    B, t = masks.shape
    dH = (d_pre @ params["dense_w"].T).reshape(B, t, -1) * masks[:, :, None]

    # GRU, backwards through time
    X, Z, R, HT, H = (cache[k] for k in ("gru_x", "Z", "R", "HT", "H"))
    d = H.shape[2]
    for name in ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h"):
        g[name] = np.zeros_like(params[name])
    dX = np.empty_like(X)
    dh_next = np.zeros((B, d))
    for k in range(t - 1, -1, -1):
        h_prev = H[:, k - 1] if k > 0 else np.zeros((B, d))
        z, r, ht, x = Z[:, k], R[:, k], HT[:, k], X[:, k]
        dh = dH[:, k] + dh_next
        da_h = dh * z * (1.0 - ht * ht)
        da_z = dh * (ht - h_prev) * z * (1.0 - z)
        d_rh = da_h @ params["U_h"].T
        da_r = d_rh * h_prev * r * (1.0 - r)
        g["U_h"] += (r * h_prev).T @ da_h
        g["U_z"] += h_prev.T @ da_z
        g["U_r"] += h_prev.T @ da_r
        g["W_h"] += x.T @ da_h
        g["W_z"] += x.T @ da_z
        g["W_r"] += x.T @ da_r
        g["b_h"] += da_h.sum(axis=0)
        g["b_z"] += da_z.sum(axis=0)
        g["b_r"] += da_r.sum(axis=0)
        dX[:, k] = da_h @ params["W_h"].T + da_z @ params["W_z"].T + da_r @ params["W_r"].T
        dh_next = dh * (1.0 - z) + d_rh * r + da_z @ params["U_z"].T + da_r @ params["U_r"].T

    denc = dX.reshape(B * t, -1)
    if "drop" in cache:
        denc = denc * cache["drop"]
    pooled, pre, patches = cache["pooled"], cache["conv_pre"], cache["patches"]
    g["enc_w"] = pooled.T @ denc
    g["enc_b"] = denc.sum(axis=0)
    d_pooled = denc @ params["enc_w"].T
    n_pix = pre.shape[1] * pre.shape[2]
    d_pre_conv = (pre > 0) * (d_pooled[:, None, None, :] / n_pix)
    n_ch = pre.shape[-1]
    g["conv_w"] = (patches.reshape(-1, 9).T @ d_pre_conv.reshape(-1, n_ch)).reshape(3, 3, n_ch)
    g["conv_b"] = d_pre_conv.sum(axis=(0, 1, 2))
    return g


def forward(m: RacnetModel, volume) -> dict:
    """Inference on one volume (dropout off).

    Returns the alignment ``plan``, ``logits``, ``probs``, dense ``latent`` and
    the flattened routed recurrent outputs ``masked_concat``.
    """
    plan, padded, mask = pad_volume(m.config, volume)
    out = forward_batch(m.params, m.config, padded[None], mask[None])
    return {
        "plan": plan,
        "logits": out["logits"][0],
        "probs": out["probs"][0],
        "latent": out["latent"][0],
        "masked_concat": out["masked_concat"][0],
    }


def predict_batch(m: RacnetModel, volumes: Sequence, batch_size: int = 64) -> dict[str, np.ndarray]:
    """Batched inference; returns stacked ``probs`` and ``latent`` arrays."""
    probs, latents = [], []
    for i in range(0, len(volumes), batch_size):
        X, masks = pad_batch(m.config, volumes[i : i + batch_size])
        out = forward_batch(m.params, m.config, X, masks)
        probs.append(out["probs"])
        latents.append(out["latent"])
    if not probs:
        return {"probs": np.zeros((0, 2)), "latent": np.zeros((0, m.config.d_dense))}
    return {"probs": np.concatenate(probs), "latent": np.concatenate(latents)}


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    return float(-np.mean(np.log(probs[np.arange(len(labels)), labels])))


def batch_loss_and_grad(params, cfg: ModelConfig, X, masks, labels, rng=None):
    """Mean softmax cross-entropy over a padded batch and its gradients."""
    cache = {}
    out = forward_batch(params, cfg, X, masks, rng=rng, cache=cache)
    B = len(labels)
    dlogits = out["probs"].copy()
    dlogits[np.arange(B), labels] -= 1.0
    dlogits /= B
    grads = backward_batch(params, cache, dlogits)
    return cross_entropy(out["probs"], labels), grads, out


def _labels(volumes) -> np.ndarray:
    labels = [getattr(v, "label", None) for v in volumes]
    if any(lab is None for lab in labels):
        raise DataError("every volume in a training batch needs a label")
    return np.asarray(labels, dtype=int)


def loss_and_grad(m: RacnetModel, batch: Sequence, labels: Optional[Sequence[int]] = None):
    """Loss and exact gradients for a list of volumes (dropout off).

    Labels come from the volumes unless given explicitly.
    """
    if len(batch) == 0:
        raise DataError("empty batch")
    y = np.asarray(labels, dtype=int) if labels is not None else _labels(batch)
    X, masks = pad_batch(m.config, batch)
    loss, grads, _ = batch_loss_and_grad(m.params, m.config, X, masks, y)
    return loss, grads
