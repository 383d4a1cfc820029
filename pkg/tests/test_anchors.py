import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_kmeans
from racnet.anchors import (
    Anchor,
    AnchorSet,
    KmeansConfig,
    KmeansResult,
    LatentSet,
    anchor_accuracy,
    anchors_from_latents,
    build_anchor_set,
    classify_nearest,
    confidence,
    extract_latents,
    kmeans,
    load_anchor_set,
    save_anchor_set,
    select_k,
    select_k_latents,
)
from racnet.errors import ConfigError, ModelError
from racnet.nnet import forward


def latents(X, labels):
    return LatentSet(np.asarray(X, float), [f"p{i}" for i in range(len(X))], list(labels))


def two_blobs(rng, n=20, sep=5.0, dim=3):
    X = np.concatenate([rng.normal(0, 0.3, (n, dim)), rng.normal(sep, 0.3, (n, dim))])
    return X, [0] * n + [1] * n


# --- k-means -------------------------------------------------------------------------


def test_two_points():
    X = np.array([[0.0, 1.0], [3.0, -1.0]])
    r = kmeans(X, KmeansConfig(k=2))
    assert r.objective == 0.0
    assert sorted(map(tuple, r.centers)) == sorted(map(tuple, X))


def test_k1_is_mean(rng):
    X = rng.normal(size=(13, 4))
    r = kmeans(X, KmeansConfig(k=1))
    np.testing.assert_allclose(r.centers[0], X.mean(axis=0), rtol=1e-12)
    assert r.objective == pytest.approx(X.var(axis=0).sum() * len(X), rel=1e-12)


def test_k_exceeds_points():
    with pytest.raises(ConfigError):
        kmeans(np.zeros((2, 2)), KmeansConfig(k=3))


def test_two_tight_blobs_reach_brute_force_optimum(rng):
    X = np.concatenate([rng.normal(0, 0.1, (4, 2)), rng.normal(3, 0.1, (4, 2))])
    r = kmeans(X, KmeansConfig(k=2))
    assert r.objective == pytest.approx(brute_force_kmeans(X, 2), rel=1e-10)


def test_brute_force_oracle_small_cases():
    assert brute_force_kmeans(np.array([[0.0], [1.0], [10.0]]), 2) == pytest.approx(0.5)
    assert brute_force_kmeans(np.array([[0.0], [2.0]]), 1) == pytest.approx(2.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 9), st.integers(1, 3), st.integers(0, 10**6))
def test_objective_monotone_and_consistent(n, k, seed):
    k = min(k, n)
    X = np.random.default_rng(seed).normal(size=(n, 2))
    r = kmeans(X, KmeansConfig(k=k, restarts=2, seed=seed))
    assert all(b <= a * (1 + 1e-12) for a, b in zip(r.history, r.history[1:]))
    # converged centres are the means of their members, and no point prefers another centre
    for j in range(k):
        np.testing.assert_allclose(r.centers[j], X[r.assignments == j].mean(axis=0), rtol=1e-10, atol=1e-12)
    d = ((X[:, None] - r.centers[None]) ** 2).sum(axis=2)
    assert np.all(d[np.arange(n), r.assignments] <= d.min(axis=1) + 1e-12)
    assert r.objective >= brute_force_kmeans(X, k) - 1e-9


def test_kmeans_deterministic(rng):
    X = rng.normal(size=(30, 3))
    a, b = kmeans(X, KmeansConfig(k=4, seed=3)), kmeans(X, KmeansConfig(k=4, seed=3))
    np.testing.assert_array_equal(a.assignments, b.assignments)


def test_duplicate_points_repairs_empty_cluster():
    X = np.array([[0.0, 0.0]] * 5 + [[1.0, 1.0]])
    r = kmeans(X, KmeansConfig(k=2, restarts=1))
    assert r.objective == 0.0
    assert set(r.assignments) == {0, 1}


# --- anchors -------------------------------------------------------------------------


def clusters(assign, X):
    assign = np.asarray(assign)
    k = assign.max() + 1
    centers = np.stack([np.asarray(X)[assign == j].mean(axis=0) for j in range(k)])
    return KmeansResult(assign, centers, 0.0)


def test_single_point_cluster():
    X = [[1.0, 2.0], [5.0, 5.0], [5.0, 6.0]]
    aset = build_anchor_set(clusters([0, 1, 1], X), latents(X, [0, 1, 1]), {"dataset": "A"})
    a = aset.anchors[0]
    np.testing.assert_array_equal(a.center, [1.0, 2.0])
    assert a.radius == 0.0 and a.member_count == 1
    assert aset.anchors[1].member_count == 2
    assert a.provenance == {"dataset": "A", "space": "base"}


@pytest.mark.parametrize("labels,expect", [([1, 1, 0], 1), ([1, 0], 1), ([0, 0, 1], 0)])
def test_majority_and_tie(labels, expect):
    X = np.arange(len(labels), dtype=float)[:, None]
    aset = build_anchor_set(clusters([0] * len(labels), X), latents(X, labels), {})
    assert aset.anchors[0].label == expect


def test_radius_is_95th_percentile(rng):
    X = rng.normal(size=(40, 2))
    aset = build_anchor_set(clusters([0] * 40, X), latents(X, [0] * 40), {})
    d = np.sort(np.linalg.norm(X - X.mean(axis=0), axis=1))
    # linear interpolation between order statistics at rank 0.95 * 39
    pos = 0.95 * 39
    expect = d[int(pos)] + (pos - int(pos)) * (d[int(pos) + 1] - d[int(pos)])
    assert aset.anchors[0].radius == pytest.approx(expect, rel=1e-12)


def test_empty_cluster_dropped(caplog):
    X = np.array([[0.0], [1.0]])
    res = KmeansResult(np.array([0, 0]), np.array([[0.5], [9.0]]), 0.0)
    aset = build_anchor_set(res, latents(X, [0, 1]), {})
    assert len(aset) == 1
    assert "empty cluster" in caplog.text


def anchor(i, center, label=0, radius=1.0):
    return Anchor(i, np.asarray(center, float), label, radius, 1)


def test_classify_nearest_examples():
    aset = AnchorSet([anchor(0, [0, 0], 0, 2.0), anchor(1, [4, 0], 1, 2.0)])
    r = classify_nearest(aset, [4, 0])
    assert (r.anchor_id, r.label, r.distance, r.confidence) == (1, 1, 0.0, 1.0)
    assert classify_nearest(aset, [2, 0]).anchor_id == 0
    assert classify_nearest(aset, [-4, 0]).confidence == pytest.approx(0.5)
    assert confidence(4.0, 2.0) == 0.5


def test_tie_goes_to_smaller_id_regardless_of_order():
    aset = AnchorSet([anchor(5, [4, 0]), anchor(2, [0, 0])])
    assert classify_nearest(aset, [2, 0]).anchor_id == 2


def test_empty_anchor_set():
    with pytest.raises(ModelError):
        classify_nearest(AnchorSet([], dim=2), [0, 0])


def test_anchor_json_roundtrip(tmp_path):
    aset = AnchorSet([anchor(0, [0.1, 0.2]), Anchor(1, np.array([3.0, 4.0]), 1, 0.5, 7, 2, "x", {"dataset": "B"})],
                     space="head")
    save_anchor_set(aset, tmp_path / "a.json")
    back = load_anchor_set(tmp_path / "a.json")
    assert back.to_json() == aset.to_json()
    d = json.loads((tmp_path / "a.json").read_text())
    assert d["anchors"][1]["count"] == 7 and d["space"] == "head"


def test_select_k_singleton_and_argmax(rng):
    X, y = two_blobs(rng)
    V, yv = two_blobs(np.random.default_rng(1))
    sel = select_k_latents(latents(X, y), latents(V, yv), [3], KmeansConfig())
    assert sel.best_k == 3
    sel = select_k_latents(latents(X, y), latents(V, yv), range(2, 7), KmeansConfig())
    assert all(sel.accuracy[sel.best_k] >= a for a in sel.accuracy.values())
    assert sel.accuracy[sel.best_k] == 1.0
    assert len(sel.best) == sel.best_k


# --- with a trained network ----------------------------------------------------------


def test_extract_latents_matches_forward(small_trained, small_synthetic):
    model, _ = small_trained
    _, ds, _ = small_synthetic
    v = ds.volumes[0]
    lat = extract_latents(model, [v, v.__class__("dup", v.slices, v.label)])
    np.testing.assert_allclose(lat.vectors[0], forward(model, v)["latent"], rtol=1e-12)
    np.testing.assert_array_equal(lat.vectors[0], lat.vectors[1])


def test_anchors_track_network(small_trained, small_synthetic):
    model, _ = small_trained
    _, _, (tr, va, te) = small_synthetic
    lat = extract_latents(model, tr)
    sel = select_k(model, lat, va, range(2, 6), KmeansConfig(seed=1), {"dataset": "A"})
    acc = anchor_accuracy(sel.best, extract_latents(model, te))
    net = np.mean(np.array([forward(model, v)["probs"].argmax() for v in te]) == np.array(te.labels))
    assert abs(acc - net) <= 0.1
    # training clusters are mostly pure with respect to their anchor label
    aset = anchors_from_latents(lat, KmeansConfig(k=4), {})
    assert anchor_accuracy(aset, lat) >= 0.9
