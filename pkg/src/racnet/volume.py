"""Variable-length volumes, a synthetic generator, resizing, splitting and file I/O.

A volume is an ordered stack of 2-D slices sharing one (h, w) grid with a
single label for the whole stack. Slices are held as 64-bit floats in memory
and stored as little-endian 32-bit floats on disk.
"""

from __future__ import annotations

import json
import struct
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import BadMagicError, ConfigError, DataError, DimensionError, ShapeError, TruncatedError

VOLUME_MAGIC = b"VOL1"
_HEADER = struct.Struct("<4sIII")


@dataclass
class Volume:
    id: str
    slices: np.ndarray  # (l, h, w) float64
    label: Optional[int] = None

    def __post_init__(self):
        self.slices = np.asarray(self.slices, dtype=np.float64)
        if self.slices.ndim != 3:
            raise ShapeError(f"volume {self.id!r}: slices must be (l, h, w), got shape {self.slices.shape}")
        if min(self.slices.shape) < 1:
            raise ShapeError(f"volume {self.id!r}: empty dimension in {self.slices.shape}")
        if not np.all(np.isfinite(self.slices)):
            raise DataError(f"volume {self.id!r}: non-finite intensities")
        if self.label is not None and self.label not in (0, 1):
            raise DataError(f"volume {self.id!r}: label must be 0 or 1, got {self.label!r}")

    @property
    def length(self) -> int:
        return self.slices.shape[0]

    @property
    def shape2d(self) -> tuple[int, int]:
        return self.slices.shape[1], self.slices.shape[2]

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.id == other.id
            and self.label == other.label
            and self.slices.shape == other.slices.shape
            and np.array_equal(self.slices, other.slices)
        )


@dataclass
class Dataset:
    volumes: list[Volume]
    name: str = "dataset"
    seed: Optional[int] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [v.id for v in self.volumes]
        if len(set(ids)) != len(ids):
            raise DataError(f"dataset {self.name!r}: duplicate volume ids")

    def __len__(self):
        return len(self.volumes)

    def __iter__(self):
        return iter(self.volumes)

    @property
    def labels(self) -> list[Optional[int]]:
        return [v.label for v in self.volumes]

    @property
    def class_counts(self) -> dict[int, int]:
        counts = Counter(v.label for v in self.volumes if v.label is not None)
        return {0: counts.get(0, 0), 1: counts.get(1, 0)}

    def subset(self, indices: Sequence[int], name: Optional[str] = None) -> "Dataset":
        return Dataset(
            [self.volumes[i] for i in indices],
            name=name or self.name,
            seed=self.seed,
            meta=dict(self.meta),
        )


@dataclass(frozen=True)
class SyntheticConfig:
    n_per_class: int = 200
    l_min: int = 8
    l_max: int = 24
    h: int = 16
    w: int = 16
    anomaly_amplitude: float = 0.5
    anomaly_band_fraction: float = 0.4
    noise_sigma: float = 0.05
    background: float = 0.25
    blob_width: float = 0.2  # Gaussian std as a fraction of min(h, w)

    def validate(self) -> None:
        if self.n_per_class < 0:
            raise ConfigError("n_per_class must be >= 0")
        if not 1 <= self.l_min <= self.l_max:
            raise ConfigError(f"need 1 <= l_min <= l_max, got {self.l_min}, {self.l_max}")
        if self.h < 1 or self.w < 1:
            raise ConfigError("slice dims must be >= 1")
        if not self.anomaly_amplitude > 0:
            raise ConfigError("anomaly_amplitude must be > 0")
        if not 0 < self.anomaly_band_fraction <= 1:
            raise ConfigError("anomaly_band_fraction must lie in (0, 1]")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not 0 <= self.background <= 1:
            raise ConfigError("background must lie in [0, 1]")
        if not self.blob_width > 0:
            raise ConfigError("blob_width must be > 0")


def anomaly_band(length: int, fraction: float) -> range:
    """Indices of the trailing slices that carry the anomaly for a given length."""
    n = max(1, int(np.ceil(fraction * length)))
    return range(length - n, length)


def _synthetic_volume(cfg: SyntheticConfig, seed: int, index: int, label: int) -> np.ndarray:
    rng = np.random.default_rng([seed, index])
    length = int(rng.integers(cfg.l_min, cfg.l_max + 1))
    vol = cfg.background + cfg.noise_sigma * rng.standard_normal((length, cfg.h, cfg.w))
    if label == 1:
        cy = rng.uniform(0.3, 0.7) * (cfg.h - 1)
        cx = rng.uniform(0.3, 0.7) * (cfg.w - 1)
        s = cfg.blob_width * min(cfg.h, cfg.w)
        yy, xx = np.mgrid[0 : cfg.h, 0 : cfg.w]
        blob = cfg.anomaly_amplitude * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        band = anomaly_band(length, cfg.anomaly_band_fraction)
        vol[band.start : band.stop] += blob
    vol = np.clip(vol, 0.0, 1.0)
    # quantize to the on-disk precision so write/read is an exact roundtrip
    return vol.astype(np.float32).astype(np.float64)


def generate_synthetic_dataset(cfg: SyntheticConfig, seed: int, name: str = "synthetic") -> Dataset:
    """Generate ``2 * n_per_class`` labelled volumes, deterministic in ``(cfg, seed)``.

    Labels alternate 0, 1, 0, 1, ... Each volume draws from its own random
    stream keyed on ``(seed, index)``, so volumes can be produced in any order.
    Positive volumes carry a smooth Gaussian blob in the trailing
    ``anomaly_band_fraction`` of their slices.
    """
    cfg.validate()
    volumes = []
    for i in range(2 * cfg.n_per_class):
        label = i % 2
        volumes.append(Volume(f"{name}_{i:05d}", _synthetic_volume(cfg, seed, i, label), label))
    return Dataset(volumes, name=name, seed=seed, meta={"synthetic": asdict(cfg)})


def resize_slice(s: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resize with corner-aligned sampling.

    A target size of 1 along an axis samples the centre of the source axis.
    """
    if h < 1 or w < 1:
        raise ShapeError(f"target size must be positive, got ({h}, {w})")
    s = np.asarray(s, dtype=np.float64)
    if s.shape == (h, w):
        return s.copy()

    def coords(n_src, n_dst):
        if n_dst == 1:
            x = np.array([(n_src - 1) / 2.0])
        else:
            x = np.arange(n_dst) * ((n_src - 1) / (n_dst - 1))
        i0 = np.clip(np.floor(x).astype(int), 0, n_src - 1)
        i1 = np.minimum(i0 + 1, n_src - 1)
        return i0, i1, x - i0

    y0, y1, fy = coords(s.shape[0], h)
    x0, x1, fx = coords(s.shape[1], w)
    fy = fy[:, None]
    top = s[y0][:, x0] * (1 - fx) + s[y0][:, x1] * fx
    bot = s[y1][:, x0] * (1 - fx) + s[y1][:, x1] * fx
    out = top * (1 - fy) + bot * fy
    # guard against rounding just outside the convex hull
    return np.clip(out, s.min(), s.max())


def resize_volume(v: Volume, h: int, w: int) -> Volume:
    return Volume(v.id, np.stack([resize_slice(s, h, w) for s in v.slices]), v.label)


def split_dataset(ds: Dataset, fractions: Sequence[float], seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """Stratified train/val/test split.

    Each class is shuffled with its own stream and cut at rounded fraction
    boundaries; the test split takes the remainder. Volumes keep their
    original relative order inside each split.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ConfigError(f"fractions must be three non-negative numbers, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must sum to 1, got {sum(fractions)!r}")

    parts: list[list[int]] = [[], [], []]
    by_label: dict = {}
    for i, v in enumerate(ds.volumes):
        by_label.setdefault(v.label, []).append(i)
    for key in sorted(by_label, key=lambda x: (x is None, x)):
        idx = np.array(by_label[key])
        rng = np.random.default_rng([seed, -1 if key is None else key])
        idx = idx[rng.permutation(len(idx))]
        n_train = int(round(fractions[0] * len(idx)))
        n_val = min(int(round(fractions[1] * len(idx))), len(idx) - n_train)
        parts[0].extend(idx[:n_train])
        parts[1].extend(idx[n_train : n_train + n_val])
        parts[2].extend(idx[n_train + n_val :])

    return tuple(ds.subset(sorted(p)) for p in parts)


# --- codec ------------------------------------------------------------------


def encode_volume(v: Volume) -> bytes:
    l, h, w = v.slices.shape
    payload = np.ascontiguousarray(v.slices, dtype="<f4").tobytes()
    return _HEADER.pack(VOLUME_MAGIC, l, h, w) + payload


def decode_volume(buf: bytes, id: str = "volume") -> Volume:
    if len(buf) < 4 or buf[:4] != VOLUME_MAGIC:
        raise BadMagicError(f"{id}: bad magic {buf[:4]!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedError(f"{id}: header truncated ({len(buf)} bytes)")
    _, l, h, w = _HEADER.unpack_from(buf)
    if l == 0 or h == 0 or w == 0:
        raise DimensionError(f"{id}: zero dimension in header (l={l}, h={h}, w={w})")
    expected = 4 * l * h * w
    got = len(buf) - _HEADER.size
    if got < expected:
        raise TruncatedError(f"{id}: payload holds {got} bytes, header needs {expected}")
    if got > expected:
        raise DimensionError(f"{id}: {got - expected} trailing bytes beyond declared l*h*w")
    data = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).astype(np.float64)
    return Volume(id, data.reshape(l, h, w))


def write_volume(v: Volume, path) -> None:
    Path(path).write_bytes(encode_volume(v))


def read_volume(path, id: Optional[str] = None) -> Volume:
    path = Path(path)
    return decode_volume(path.read_bytes(), id=id or path.stem)


def write_dataset(ds: Dataset, directory, manifest_name: str = "manifest.jsonl") -> Path:
    """Write volumes under ``directory/volumes`` plus a JSON-lines manifest.

    Labels live only in the manifest. Returns the manifest path.
    """
    directory = Path(directory)
    (directory / "volumes").mkdir(parents=True, exist_ok=True)
    lines = []
    for v in ds.volumes:
        rel = f"volumes/{v.id}.vol"
        write_volume(v, directory / rel)
        lines.append(json.dumps({"id": v.id, "path": rel, "label": v.label, "length": v.length}))
    manifest = directory / manifest_name
    manifest.write_text("".join(line + "\n" for line in lines))
    return manifest


def write_manifest(ds: Dataset, path) -> None:
    lines = [
        json.dumps({"id": v.id, "path": f"volumes/{v.id}.vol", "label": v.label, "length": v.length})
        for v in ds.volumes
    ]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_manifest(path) -> list[dict]:
    rows = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        row = json.loads(line)
        missing = {"id", "path", "label", "length"} - row.keys()
        if missing:
            raise DataError(f"{path}:{n}: manifest row missing {sorted(missing)}")
        rows.append(row)
    return rows


def read_dataset(manifest_path, name: Optional[str] = None) -> Dataset:
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    volumes = []
    for row in read_manifest(manifest_path):
        v = read_volume(base / row["path"], id=row["id"])
        if v.length != row["length"]:
            raise DataError(f"{row['id']}: manifest length {row['length']} != file length {v.length}")
        volumes.append(Volume(row["id"], v.slices, row["label"]))
    return Dataset(volumes, name=name or manifest_path.parent.name)
