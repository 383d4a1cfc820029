"""Cross-dataset unification through a small head network on frozen base latents.

Party B trains a three-layer head (L -> 64 -> 128 -> 2) on the frozen base
model's dense latents of its own data, clusters the 128-d hidden layer into
its own anchors, and merges them with party A's anchors projected through the
head's first two layers. Only checkpoints and anchor files cross the
boundary; no volume of dataset A is touched here.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .anchors import (
    RADIUS_PERCENTILE,
    Anchor,
    AnchorSet,
    KmeansConfig,
    LatentSet,
    NearestResult,
    anchors_from_latents,
    classify_nearest_batch,
    extract_latents,
    select_k_latents,
)
from .errors import DataError, ModelError, ShapeError
from .nnet.checkpoint import decode_checkpoint, encode_checkpoint, load_model, save_model
from .nnet.model import RacnetModel, _softmax, predict_batch
from .nnet.optim import AdamState, adam_step
from .nnet.train import DEFAULT_LR

log = logging.getLogger(__name__)

HEAD_WIDTHS = (64, 128)


@dataclass
class HeadNetwork:
    params: dict[str, np.ndarray]
    seed: int = 0

    @classmethod
    def init(cls, in_dim: int, widths: Sequence[int] = HEAD_WIDTHS, seed: int = 0) -> "HeadNetwork":
        rng = np.random.default_rng([seed, 7])
        dims = [in_dim, *widths, 2]
        params = {}
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]), 1):
            lim = np.sqrt(6.0 / (a + b))
            params[f"W{i}"] = rng.uniform(-lim, lim, size=(a, b))
            params[f"b{i}"] = np.zeros(b)
        return cls(params, seed)

    @property
    def in_dim(self) -> int:
        return self.params["W1"].shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.params["W2"].shape[1]

    def copy(self) -> "HeadNetwork":
        return HeadNetwork({k: v.copy() for k, v in self.params.items()}, self.seed)

    def hidden(self, Z: np.ndarray) -> np.ndarray:
        """Second hidden layer activations for base latents ``Z`` (N, L)."""
        Z = np.asarray(Z, dtype=np.float64)
        if Z.ndim != 2 or Z.shape[1] != self.in_dim:
            raise ShapeError(f"head expects inputs of dim {self.in_dim}, got {Z.shape}")
        p = self.params
        a1 = np.maximum(Z @ p["W1"] + p["b1"], 0.0)
        return np.maximum(a1 @ p["W2"] + p["b2"], 0.0)

    def probs(self, Z: np.ndarray) -> np.ndarray:
        return _softmax(self.hidden(Z) @ self.params["W3"] + self.params["b3"])


def _head_loss_and_grad(p, Z, y):
    pre1 = Z @ p["W1"] + p["b1"]
    a1 = np.maximum(pre1, 0.0)
    pre2 = a1 @ p["W2"] + p["b2"]
    a2 = np.maximum(pre2, 0.0)
    probs = _softmax(a2 @ p["W3"] + p["b3"])
    n = len(y)
    loss = float(-np.mean(np.log(probs[np.arange(n), y])))
    d3 = probs.copy()
    d3[np.arange(n), y] -= 1.0
    d3 /= n
    g = {"W3": a2.T @ d3, "b3": d3.sum(axis=0)}
    d2 = (d3 @ p["W3"].T) * (pre2 > 0)
    g["W2"], g["b2"] = a1.T @ d2, d2.sum(axis=0)
    d1 = (d2 @ p["W2"].T) * (pre1 > 0)
    g["W1"], g["b1"] = Z.T @ d1, d1.sum(axis=0)
    return loss, g, probs


def train_head_on_latents(latents: LatentSet, epochs: int, seed: int = 0, batch_size: int = 5,
                          lr: float = DEFAULT_LR, widths: Sequence[int] = HEAD_WIDTHS):
    head = HeadNetwork.init(latents.dim, widths, seed)
    history = []
    if epochs <= 0 or len(latents) == 0:
        return head, history
    Z, y = latents.vectors, latents.label_array()
    state = AdamState(lr=lr)
    p = head.params
    n = len(y)
    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch, 2]).permutation(n)
        total, correct = 0.0, 0
        for s in range(0, n, batch_size):
            idx = order[s : s + batch_size]
            loss, g, probs = _head_loss_and_grad(p, Z[idx], y[idx])
            p, state = adam_step(p, g, state)
            total += loss * len(idx)
            correct += int(np.sum(probs.argmax(axis=1) == y[idx]))
        history.append({"epoch": epoch + 1, "loss": total / n, "accuracy": correct / n})
    head.params = p
    return head, history


def train_head(base: RacnetModel, ds_b, epochs: int, seed: int = 0, **kw):
    """Train the head on frozen base latents of ``ds_b``. Returns ``(head, history)``."""
    return train_head_on_latents(extract_latents(base, ds_b), epochs, seed, **kw)


def extract_head_latents(base: RacnetModel, head: HeadNetwork, ds) -> LatentSet:
    base_lat = extract_latents(base, ds)
    return LatentSet(head.hidden(base_lat.vectors), base_lat.ids, base_lat.labels)


def project_anchor_set(head: HeadNetwork, aset: AnchorSet, members: Optional[LatentSet] = None,
                       assignments: Optional[np.ndarray] = None) -> AnchorSet:
    """Map anchors from the base latent space into the head's hidden space.

    Centres go through the head's first two layers. With the member latents
    and their cluster assignments available, radii are recomputed from the
    projected members; otherwise the stored radius is kept.
    """
    if aset.dim != head.in_dim:
        raise ModelError(f"anchor dim {aset.dim} does not match head input dim {head.in_dim}")
    if not aset.anchors:
        return AnchorSet([], "head", head.hidden_dim, "stored")
    centers = head.hidden(aset.centers())
    recompute = members is not None and assignments is not None
    if recompute:
        projected_members = head.hidden(members.vectors)
    out = []
    for a, c in zip(aset.anchors, centers):
        radius = a.radius
        if recompute:
            sel = projected_members[np.asarray(assignments) == a.id]
            if len(sel):
                radius = float(np.percentile(np.linalg.norm(sel - c, axis=1), RADIUS_PERCENTILE))
        out.append(Anchor(a.id, c, a.label, radius, a.member_count, a.severity, a.note,
                          dict(a.provenance, space="head")))
    return AnchorSet(out, "head", head.hidden_dim, "recomputed" if recompute else "stored")


def merge_anchor_sets(*sets: AnchorSet) -> AnchorSet:
    """Union of anchor sets in one space; ids are renumbered consecutively in input order."""
    dims = {s.dim for s in sets if s.anchors}
    if len(dims) > 1:
        raise ModelError(f"cannot merge anchor sets of different dims {sorted(dims)}")
    merged = []
    for s in sets:
        for a in sorted(s.anchors, key=lambda a: a.id):
            prov = dict(a.provenance)
            prov.setdefault("source_id", a.id)
            merged.append(Anchor(len(merged), a.center, a.label, a.radius, a.member_count,
                                 a.severity, a.note, prov))
    dim = dims.pop() if dims else (sets[0].dim if sets else 0)
    modes = sorted({s.radius_mode for s in sets if s.anchors})
    return AnchorSet(merged, "head", dim, "+".join(modes) if modes else "native")


@dataclass
class UnifiedModel:
    base: RacnetModel
    head: HeadNetwork
    merged: AnchorSet
    info: dict = field(default_factory=dict)
    anchors_b: Optional[AnchorSet] = None

    def __post_init__(self):
        if self.merged.anchors and self.merged.dim != self.head.hidden_dim:
            raise ModelError("merged anchors must live in the head's hidden space")


def build_unified_model(base: RacnetModel, head: HeadNetwork, aset_a: AnchorSet, latents_b: LatentSet,
                        cfg: KmeansConfig, val_latents_b: Optional[LatentSet] = None,
                        k_range: Optional[Sequence[int]] = None, name_b: str = "B",
                        members_a: Optional[LatentSet] = None,
                        assignments_a: Optional[np.ndarray] = None) -> UnifiedModel:
    """Cluster B's head-space latents, project A's anchors into head space and merge.

    ``latents_b`` and ``val_latents_b`` are head-space latents (see
    ``extract_head_latents``). With ``k_range`` and validation latents, B's k
    is chosen by validation accuracy; otherwise ``cfg.k`` is used.
    """
    if aset_a.dim != base.config.d_dense:
        raise ModelError(f"anchor set A has dim {aset_a.dim}, base latents have {base.config.d_dense}")
    if len(latents_b) and latents_b.dim != head.hidden_dim:
        raise ShapeError("latents_b must be head-space latents")
    projected = project_anchor_set(head, aset_a, members_a, assignments_a)
    info = {}
    prov_b = {"dataset": name_b}
    if len(latents_b) == 0:
        aset_b = AnchorSet([], "head", head.hidden_dim)
    elif k_range is not None and val_latents_b is not None and len(val_latents_b):
        sel = select_k_latents(latents_b, val_latents_b, [k for k in k_range if k <= len(latents_b)],
                               cfg, prov_b, space="head")
        aset_b = sel.best
        info["k_b"] = sel.best_k
        info["k_b_accuracy"] = {str(k): v for k, v in sel.accuracy.items()}
    else:
        aset_b = anchors_from_latents(latents_b, cfg, prov_b, space="head")
        info["k_b"] = cfg.k
    info.update(n_a=len(projected), n_b=len(aset_b))
    return UnifiedModel(base, head, merge_anchor_sets(projected, aset_b), info, aset_b)


def unified_representation(u: UnifiedModel, volumes: Sequence) -> np.ndarray:
    base = u.base.with_config(keep_prob=1.0) if u.base.config.keep_prob < 1 else u.base
    return u.head.hidden(predict_batch(base, list(volumes))["latent"])


def classify_unified_batch(u: UnifiedModel, volumes: Sequence) -> list[NearestResult]:
    if not volumes:
        return []
    return classify_nearest_batch(u.merged, unified_representation(u, volumes))


def classify_unified(u: UnifiedModel, v) -> NearestResult:
    """Nearest merged anchor for one volume; ``provenance['dataset']`` names the source."""
    return classify_unified_batch(u, [v])[0]


# --- exchange bundle ----------------------------------------------------------------


def save_head(head: HeadNetwork, path) -> None:
    Path(path).write_bytes(encode_checkpoint({"kind": "head", "seed": head.seed}, head.params))


def load_head(path) -> HeadNetwork:
    config, params = decode_checkpoint(Path(path).read_bytes())
    if config.get("kind") != "head":
        raise DataError(f"{path}: not a head checkpoint")
    return HeadNetwork(params, config.get("seed", 0))


def save_bundle(u: UnifiedModel, directory) -> None:
    from .anchors import save_anchor_set

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_model(u.base, d / "base.racn")
    save_head(u.head, d / "head.racn")
    save_anchor_set(u.merged, d / "anchors_merged.json")
    if u.anchors_b is not None:
        save_anchor_set(u.anchors_b, d / "anchors_b.json")
    (d / "unify_info.json").write_text(json.dumps(u.info, indent=1, sort_keys=True) + "\n")


def load_bundle(directory) -> UnifiedModel:
    from .anchors import load_anchor_set

    d = Path(directory)
    info_path = d / "unify_info.json"
    info = json.loads(info_path.read_text()) if info_path.exists() else {}
    return UnifiedModel(load_model(d / "base.racn"), load_head(d / "head.racn"),
                        load_anchor_set(d / "anchors_merged.json"), info)
