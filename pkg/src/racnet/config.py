"""Flat ``key = value`` run configuration."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional

from .anchors import KmeansConfig
from .errors import ConfigError
from .nnet.model import ModelConfig
from .volume import SyntheticConfig


@dataclass(frozen=True)
class RunConfig:
    # artifact paths; empty means "derive from --out"
    data: str = ""
    data_b: str = ""
    model: str = ""
    anchors: str = ""
    bundle: str = ""
    predictions: str = ""
    manifest: str = ""
    split: str = "test"
    dataset_name: str = "synthetic"
    # synthetic data
    n_per_class: int = 200
    l_min: int = 8
    l_max: int = 24
    h: int = 16
    w: int = 16
    anomaly_amplitude: float = 0.5
    anomaly_band_fraction: float = 0.4
    noise_sigma: float = 0.05
    background: float = 0.25
    blob_width: float = 0.2
    train_fraction: float = 0.6
    val_fraction: float = 0.2
    test_fraction: float = 0.2
    # model
    t: int = 24
    channels: int = 4
    d_enc: int = 16
    d_rnn: int = 16
    d_dense: int = 32
    routing: str = "aligned"
    mask: bool = True
    keep_prob: float = 1.0
    # training
    seed: int = 0
    epochs: int = 30
    batch_size: int = 5
    lr: float = 1e-4
    # anchors
    k: int = 11
    k_range: str = ""
    max_iterations: int = 100
    restarts: int = 5
    tolerance: float = 0.0
    # unification
    head_epochs: int = 50
    k_b: int = 13
    # ablation
    ablate_seeds: int = 3

    def synthetic(self) -> SyntheticConfig:
        return SyntheticConfig(self.n_per_class, self.l_min, self.l_max, self.h, self.w, self.anomaly_amplitude,
                               self.anomaly_band_fraction, self.noise_sigma, self.background, self.blob_width)

    def model_config(self, **overrides) -> ModelConfig:
        kw = dict(t=self.t, h=self.h, w=self.w, channels=self.channels, d_enc=self.d_enc, d_rnn=self.d_rnn,
                  d_dense=self.d_dense, routing=self.routing, mask=self.mask, keep_prob=self.keep_prob,
                  seed=self.seed)
        kw.update(overrides)
        return ModelConfig(**kw)

    def kmeans(self, k: Optional[int] = None) -> KmeansConfig:
        return KmeansConfig(k or self.k, self.max_iterations, self.restarts, self.tolerance, self.seed)

    def fractions(self) -> tuple[float, float, float]:
        return self.train_fraction, self.val_fraction, self.test_fraction

    def k_values(self) -> Optional[list[int]]:
        return parse_k_range(self.k_range) if self.k_range else None


def parse_k_range(text: str) -> list[int]:
    """``"2..25"`` -> [2, ..., 25]; a single integer is a one-element range."""
    try:
        if ".." in text:
            a, b = text.split("..", 1)
            lo, hi = int(a), int(b)
        else:
            lo = hi = int(text)
    except ValueError:
        raise ConfigError(f"bad k range {text!r}; expected A..B") from None
    if not 1 <= lo <= hi:
        raise ConfigError(f"bad k range {text!r}; need 1 <= A <= B")
    return list(range(lo, hi + 1))


_TYPES = {f.name: type(f.default) for f in fields(RunConfig)}


def _coerce(key: str, raw) -> object:
    kind = _TYPES[key]
    if isinstance(raw, kind) and not (kind is int and isinstance(raw, bool)):
        return raw
    text = str(raw).strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r} (expected {kind.__name__})") from None


def parse_config_text(text: str) -> dict:
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _TYPES:
            raise ConfigError(f"config line {n}: unknown key {key!r}")
        values[key] = _coerce(key, value)
    return values


def load_run_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> RunConfig:
    values = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        values.update(parse_config_text(p.read_text()))
    for key, value in (overrides or {}).items():
        if key not in _TYPES:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _coerce(key, value)
    cfg = replace(RunConfig(), **values)
    # surface invalid combinations before any work starts
    cfg.synthetic().validate()
    cfg.model_config()
    cfg.kmeans()
    if cfg.split not in ("train", "val", "test", "all"):
        raise ConfigError(f"split must be train, val, test or all; got {cfg.split!r}")
    if abs(sum(cfg.fractions()) - 1.0) > 1e-9 or min(cfg.fractions()) < 0:
        raise ConfigError("train/val/test fractions must be non-negative and sum to 1")
    for key in ("epochs", "head_epochs", "batch_size", "ablate_seeds", "k_b"):
        if getattr(cfg, key) < (0 if "epochs" in key else 1):
            raise ConfigError(f"{key} out of range: {getattr(cfg, key)}")
    cfg.k_values()
    return cfg
