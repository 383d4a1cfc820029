"""Latent anchors: k-means++ over dense-layer activations and nearest-anchor classification.

An anchor is a labelled cluster centre in some latent space, together with a
radius (95th percentile of member distances) used to turn a distance into a
confidence score. Anchor sets serialize to JSON and are the unit two parties
exchange when unifying models.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, ModelError, ShapeError

log = logging.getLogger(__name__)

ANCHOR_FILE_VERSION = 1
RADIUS_PERCENTILE = 95.0
SPACES = ("base", "head")


@dataclass
class LatentSet:
    vectors: np.ndarray  # (N, L)
    ids: list[str]
    labels: list[Optional[int]]

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ShapeError(f"latent vectors must be 2-D, got {self.vectors.shape}")
        if not (len(self.ids) == len(self.labels) == len(self.vectors)):
            raise DataError("ids, labels and vectors disagree in length")
        if len(set(self.ids)) != len(self.ids):
            raise DataError("latent row ids must be unique")
        if not np.all(np.isfinite(self.vectors)):
            raise DataError("non-finite latent values")

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def label_array(self) -> np.ndarray:
        if any(lab is None for lab in self.labels):
            raise DataError("latent set contains unlabelled rows")
        return np.asarray(self.labels, dtype=int)


@dataclass
class Anchor:
    id: int
    center: np.ndarray
    label: int
    radius: float
    member_count: int
    severity: Optional[int] = None
    note: Optional[str] = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        if self.radius < 0:
            raise ModelError("anchor radius must be >= 0")
        if self.member_count < 1:
            raise ModelError("anchor must have at least one member")
        if self.severity is not None and not 1 <= self.severity <= 4:
            raise ModelError("severity must lie in 1..4")

    def to_json(self) -> dict:
        d = {
            "id": self.id,
            "center": [float(x) for x in self.center],
            "label": self.label,
            "radius": float(self.radius),
            "count": self.member_count,
            "provenance": self.provenance,
        }
        if self.severity is not None:
            d["severity"] = self.severity
        if self.note is not None:
            d["note"] = self.note
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Anchor":
        return cls(d["id"], d["center"], d["label"], d["radius"], d["count"],
                   d.get("severity"), d.get("note"), d.get("provenance", {}))


@dataclass
class AnchorSet:
    anchors: list[Anchor]
    space: str = "base"
    dim: int = 0
    radius_mode: str = "native"  # native | recomputed | stored

    def __post_init__(self):
        if self.space not in SPACES:
            raise ModelError(f"space must be one of {SPACES}")
        if self.anchors and not self.dim:
            self.dim = len(self.anchors[0].center)
        for a in self.anchors:
            if a.center.shape != (self.dim,):
                raise ShapeError(f"anchor {a.id}: center has shape {a.center.shape}, set dim is {self.dim}")

    def __len__(self):
        return len(self.anchors)

    def centers(self) -> np.ndarray:
        return np.stack([a.center for a in self.anchors]) if self.anchors else np.zeros((0, self.dim))

    def to_json(self) -> dict:
        return {
            "version": ANCHOR_FILE_VERSION,
            "space": self.space,
            "dim": self.dim,
            "radius_mode": self.radius_mode,
            "anchors": [a.to_json() for a in self.anchors],
        }

    @classmethod
    def from_json(cls, d: dict) -> "AnchorSet":
        if d.get("version") != ANCHOR_FILE_VERSION:
            raise ModelError(f"unsupported anchor file version {d.get('version')!r}")
        return cls([Anchor.from_json(a) for a in d["anchors"]], d["space"], d["dim"], d.get("radius_mode", "native"))


def save_anchor_set(aset: AnchorSet, path) -> None:
    Path(path).write_text(json.dumps(aset.to_json(), indent=1, sort_keys=True) + "\n")


def load_anchor_set(path) -> AnchorSet:
    return AnchorSet.from_json(json.loads(Path(path).read_text()))


# --- latents ------------------------------------------------------------------


def extract_latents(m, ds) -> LatentSet:
    """Dense-layer activations for every volume, in dataset order."""
    from .nnet import predict_batch

    if m.config.keep_prob < 1:
        m = m.with_config(keep_prob=1.0)
    volumes = list(ds)
    latent = predict_batch(m, volumes)["latent"]
    return LatentSet(latent, [v.id for v in volumes], [v.label for v in volumes])


# --- k-means --------------------------------------------------------------------


@dataclass(frozen=True)
class KmeansConfig:
    k: int = 2
    max_iterations: int = 100
    restarts: int = 5
    tolerance: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if self.restarts < 1:
            raise ConfigError("restarts must be >= 1")
        if self.tolerance < 0:
            raise ConfigError("tolerance must be >= 0")


@dataclass
class KmeansResult:
    assignments: np.ndarray
    centers: np.ndarray
    objective: float
    history: list[float] = field(default_factory=list)  # objective at each assignment step
    repairs: int = 0


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def objective(X: np.ndarray, assignments: np.ndarray, centers: np.ndarray) -> float:
    return float(((X - centers[assignments]) ** 2).sum())


def kmeans_pp_seed(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """First centre uniform, the rest drawn with probability proportional to D(x)^2."""
    n = len(X)
    idx = [int(rng.integers(n))]
    d2 = ((X - X[idx[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            nxt = int(rng.integers(n))
        idx.append(nxt)
        d2 = np.minimum(d2, ((X - X[nxt]) ** 2).sum(axis=1))
    return X[idx].copy()


def _assign(X, centers):
    return _sq_dists(X, centers).argmin(axis=1)


def _lloyd(X: np.ndarray, centers: np.ndarray, cfg: KmeansConfig) -> KmeansResult:
    k = len(centers)
    history: list[float] = []
    repairs = 0
    labels = None
    for _ in range(cfg.max_iterations):
        new_labels = _assign(X, centers)
        counts = np.bincount(new_labels, minlength=k)
        while np.any(counts == 0):
            # move an empty centre onto the point farthest from its own centre
            j = int(np.flatnonzero(counts == 0)[0])
            far = int(((X - centers[new_labels]) ** 2).sum(axis=1).argmax())
            centers = centers.copy()
            centers[j] = X[far]
            repairs += 1
            log.info("k-means: re-seeded empty cluster %d at point %d", j, far)
            new_labels = _assign(X, centers)
            counts = np.bincount(new_labels, minlength=k)
        obj = objective(X, new_labels, centers)
        if history and obj > history[-1] * (1 + 1e-12) + 1e-300:
            raise AssertionError(f"Lloyd objective increased: {history[-1]!r} -> {obj!r}")
        improvement = history[-1] - obj if history else np.inf
        history.append(obj)
        converged = labels is not None and np.array_equal(labels, new_labels)
        labels = new_labels
        centers = np.stack([X[labels == j].mean(axis=0) for j in range(k)])
        if converged or improvement < cfg.tolerance:
            break
    return KmeansResult(labels, centers, objective(X, labels, centers), history, repairs)


def kmeans(points: np.ndarray, cfg: KmeansConfig) -> KmeansResult:
    """k-means++ seeding followed by Lloyd iterations; best of ``cfg.restarts`` by objective.

    Each restart uses its own stream keyed on ``(cfg.seed, restart)``. The
    objective is the sum of squared distances of points to their assigned
    cluster means.
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError(f"points must be 2-D, got {X.shape}")
    if cfg.k > len(X):
        raise ConfigError(f"k={cfg.k} exceeds the number of points ({len(X)})")
    best = None
    for r in range(cfg.restarts):
        rng = np.random.default_rng([cfg.seed, r])
        res = _lloyd(X, kmeans_pp_seed(X, cfg.k, rng), cfg)
        if best is None or res.objective < best.objective:
            best = res
    return best


# --- anchor sets ------------------------------------------------------------------


def majority_label(labels: Iterable[int]) -> int:
    """Majority vote over {0, 1}; ties go to the positive class."""
    labels = list(labels)
    ones = sum(1 for x in labels if x == 1)
    return 1 if 2 * ones >= len(labels) else 0


def build_anchor_set(clusters: KmeansResult, latents: LatentSet, provenance: dict,
                     space: str = "base") -> AnchorSet:
    """Label each cluster by majority vote and record radius and member count.

    Empty clusters are dropped with a warning. Anchor ids are assigned
    consecutively from 0 over the surviving clusters.
    """
    y = latents.label_array()
    X = latents.vectors
    anchors = []
    for j, center in enumerate(clusters.centers):
        members = np.flatnonzero(clusters.assignments == j)
        if members.size == 0:
            log.warning("dropping empty cluster %d", j)
            continue
        dist = np.linalg.norm(X[members] - center, axis=1)
        anchors.append(Anchor(
            id=len(anchors),
            center=center,
            label=majority_label(y[members]),
            radius=float(np.percentile(dist, RADIUS_PERCENTILE)),
            member_count=int(members.size),
            provenance=dict(provenance, space=space),
        ))
    return AnchorSet(anchors, space=space, dim=X.shape[1])


def anchors_from_latents(latents: LatentSet, cfg: KmeansConfig, provenance: dict,
                         space: str = "base") -> AnchorSet:
    return build_anchor_set(kmeans(latents.vectors, cfg), latents, provenance, space)


@dataclass
class NearestResult:
    label: int
    anchor_id: int
    distance: float
    confidence: float
    provenance: dict = field(default_factory=dict)


def confidence(distance: float, radius: float) -> float:
    if distance <= radius:
        return 1.0
    return radius / distance


def classify_nearest(aset: AnchorSet, x: np.ndarray) -> NearestResult:
    """Label of the nearest anchor (Euclidean); distance ties go to the smallest anchor id."""
    return classify_nearest_batch(aset, np.asarray(x, dtype=np.float64)[None])[0]


def classify_nearest_batch(aset: AnchorSet, X: np.ndarray) -> list[NearestResult]:
    if not aset.anchors:
        raise ModelError("cannot classify against an empty anchor set")
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != aset.dim:
        raise ShapeError(f"expected vectors of dim {aset.dim}, got shape {X.shape}")
    order = sorted(range(len(aset.anchors)), key=lambda i: aset.anchors[i].id)
    anchors = [aset.anchors[i] for i in order]
    C = np.stack([a.center for a in anchors])
    D = np.sqrt(_sq_dists(X, C))
    out = []
    for row in D:
        j = int(row.argmin())  # first minimum == smallest id after sorting
        a = anchors[j]
        d = float(row[j])
        out.append(NearestResult(a.label, a.id, d, confidence(d, a.radius), a.provenance))
    return out


def anchor_accuracy(aset: AnchorSet, latents: LatentSet) -> float:
    y = latents.label_array()
    if len(y) == 0:
        return float("nan")
    pred = np.array([r.label for r in classify_nearest_batch(aset, latents.vectors)])
    return float(np.mean(pred == y))


@dataclass
class KSelection:
    best_k: int
    accuracy: dict[int, float]
    anchor_sets: dict[int, AnchorSet] = field(default_factory=dict, repr=False)

    @property
    def best(self) -> AnchorSet:
        return self.anchor_sets[self.best_k]


def select_k_latents(train: LatentSet, val: LatentSet, k_range: Sequence[int], cfg: KmeansConfig,
                     provenance: Optional[dict] = None, space: str = "base") -> KSelection:
    """Pick k by validation accuracy of nearest-anchor classification; ties favour smaller k."""
    ks = sorted(set(int(k) for k in k_range))
    if not ks:
        raise ConfigError("empty k range")
    acc, sets = {}, {}
    for k in ks:
        kcfg = KmeansConfig(k, cfg.max_iterations, cfg.restarts, cfg.tolerance, cfg.seed)
        aset = anchors_from_latents(train, kcfg, provenance or {}, space)
        sets[k] = aset
        acc[k] = anchor_accuracy(aset, val)
    best_k = min(ks, key=lambda k: (-acc[k], k))
    return KSelection(best_k, acc, sets)


def select_k(m, train_latents: LatentSet, val_ds, k_range: Sequence[int], cfg: KmeansConfig,
             provenance: Optional[dict] = None) -> KSelection:
    return select_k_latents(train_latents, extract_latents(m, val_ds), k_range, cfg, provenance)
