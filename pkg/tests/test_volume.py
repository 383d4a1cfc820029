import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from racnet.errors import BadMagicError, ConfigError, DimensionError, TruncatedError
from racnet.volume import (
    Dataset,
    SyntheticConfig,
    Volume,
    anomaly_band,
    decode_volume,
    encode_volume,
    generate_synthetic_dataset,
    read_dataset,
    read_volume,
    resize_slice,
    split_dataset,
    write_dataset,
    write_volume,
)


def test_empty_dataset():
    ds = generate_synthetic_dataset(SyntheticConfig(n_per_class=0), seed=1)
    assert len(ds) == 0


def test_generator_is_deterministic():
    cfg = SyntheticConfig(n_per_class=5, h=6, w=6)
    a = generate_synthetic_dataset(cfg, seed=7)
    b = generate_synthetic_dataset(cfg, seed=7)
    assert [encode_volume(v) for v in a] == [encode_volume(v) for v in b]
    assert a.labels == b.labels
    c = generate_synthetic_dataset(cfg, seed=8)
    assert [encode_volume(v) for v in a] != [encode_volume(v) for v in c]


def test_generator_shape_and_labels():
    cfg = SyntheticConfig(n_per_class=10, l_min=3, l_max=9, h=5, w=7)
    ds = generate_synthetic_dataset(cfg, seed=0)
    assert len(ds) == 20
    assert ds.class_counts == {0: 10, 1: 10}
    for v in ds:
        assert 3 <= v.length <= 9
        assert v.shape2d == (5, 7)
        assert v.slices.min() >= 0 and v.slices.max() <= 1


def test_positive_band_is_brighter():
    # the anomaly raises the band mean far above the noise floor of a slice mean
    cfg = SyntheticConfig(n_per_class=30, l_min=8, l_max=24, anomaly_amplitude=0.5,
                          noise_sigma=0.05, anomaly_band_fraction=0.4)
    ds = generate_synthetic_dataset(cfg, seed=11)
    band_means, neg_means = [], []
    for v in ds:
        if v.label == 1:
            band = anomaly_band(v.length, cfg.anomaly_band_fraction)
            band_means.extend(v.slices[band.start : band.stop].mean(axis=(1, 2)))
        else:
            neg_means.extend(v.slices.mean(axis=(1, 2)))
    gap = np.mean(band_means) - np.mean(neg_means)
    assert gap > 3 * cfg.noise_sigma / np.sqrt(cfg.h * cfg.w)


@pytest.mark.parametrize("kw", [
    dict(l_min=0), dict(l_min=5, l_max=4), dict(anomaly_amplitude=0.0),
    dict(noise_sigma=-0.1), dict(anomaly_band_fraction=0.0), dict(anomaly_band_fraction=1.5),
])
def test_invalid_synthetic_config(kw):
    with pytest.raises(ConfigError):
        generate_synthetic_dataset(SyntheticConfig(**kw), seed=0)


def test_resize_identity_and_constant(rng):
    s = rng.random((5, 4))
    np.testing.assert_array_equal(resize_slice(s, 5, 4), s)
    c = np.full((3, 3), 0.37)
    for shape in [(1, 1), (2, 7), (9, 4)]:
        np.testing.assert_allclose(resize_slice(c, *shape), 0.37, rtol=0, atol=1e-15)


def test_resize_hand_example():
    out = resize_slice(np.array([[0.0, 1.0], [0.0, 1.0]]), 2, 3)
    np.testing.assert_allclose(out, [[0.0, 0.5, 1.0], [0.0, 0.5, 1.0]])


@settings(max_examples=60, deadline=None)
@given(
    st.integers(1, 6), st.integers(1, 6), st.integers(1, 9), st.integers(1, 9),
    st.integers(0, 2**32 - 1),
)
def test_resize_stays_in_range(h, w, h2, w2, seed):
    s = np.random.default_rng(seed).normal(size=(h, w))
    out = resize_slice(s, h2, w2)
    assert out.shape == (h2, w2)
    assert out.min() >= s.min() and out.max() <= s.max()


def test_split_all_train():
    ds = generate_synthetic_dataset(SyntheticConfig(n_per_class=4, h=3, w=3), seed=0)
    tr, va, te = split_dataset(ds, (1.0, 0.0, 0.0), seed=1)
    assert [v.id for v in tr] == [v.id for v in ds]
    assert len(va) == len(te) == 0


def test_split_stratified_counts():
    ds = generate_synthetic_dataset(SyntheticConfig(n_per_class=100, l_min=1, l_max=2, h=2, w=2), seed=0)
    parts = split_dataset(ds, (0.6, 0.2, 0.2), seed=4)
    assert [p.class_counts for p in parts] == [{0: 60, 1: 60}, {0: 20, 1: 20}, {0: 20, 1: 20}]
    ids = [v.id for p in parts for v in p]
    assert sorted(ids) == sorted(v.id for v in ds)
    again = split_dataset(ds, (0.6, 0.2, 0.2), seed=4)
    assert [[v.id for v in p] for p in parts] == [[v.id for v in p] for p in again]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 30), st.integers(0, 30), st.floats(0.05, 0.9), st.integers(0, 1000))
def test_split_preserves_proportions(n0, n1, f_train, seed):
    vols = [Volume(f"v{i}", np.zeros((1, 1, 1)), 0) for i in range(n0)]
    vols += [Volume(f"w{i}", np.zeros((1, 1, 1)), 1) for i in range(n1)]
    ds = Dataset(vols)
    rest = 1.0 - f_train
    tr, va, te = split_dataset(ds, (f_train, rest / 2, rest / 2), seed)
    assert len(tr) + len(va) + len(te) == n0 + n1
    for c, n in ((0, n0), (1, n1)):
        assert abs(tr.class_counts[c] - f_train * n) <= 1


def test_split_bad_fractions():
    ds = Dataset([])
    with pytest.raises(ConfigError):
        split_dataset(ds, (0.5, 0.2, 0.2), seed=0)


def test_codec_roundtrip(tmp_path):
    ds = generate_synthetic_dataset(SyntheticConfig(n_per_class=3, h=5, w=4), seed=2)
    for v in ds:
        write_volume(v, tmp_path / "x.vol")
        back = read_volume(tmp_path / "x.vol", id=v.id)
        back.label = v.label
        assert back == v


def test_codec_layout():
    v = Volume("a", np.arange(12, dtype=float).reshape(3, 2, 2) / 16)
    buf = encode_volume(v)
    assert buf[:4] == b"VOL1"
    assert np.frombuffer(buf[4:16], "<u4").tolist() == [3, 2, 2]
    assert np.frombuffer(buf[16:], "<f4").tolist() == (np.arange(12) / 16).tolist()


def test_codec_rejects_bad_magic():
    buf = bytearray(encode_volume(Volume("a", np.zeros((1, 2, 2)))))
    buf[:4] = b"VOLX"
    with pytest.raises(BadMagicError):
        decode_volume(bytes(buf))


def test_codec_rejects_truncated_payload():
    buf = encode_volume(Volume("a", np.zeros((2, 3, 3))))
    # rewrite header to claim three slices while only two are present
    forged = buf[:4] + np.array([3, 3, 3], "<u4").tobytes() + buf[16:]
    with pytest.raises(TruncatedError):
        decode_volume(forged)


def test_codec_rejects_trailing_bytes():
    buf = encode_volume(Volume("a", np.zeros((2, 3, 3))))
    with pytest.raises(DimensionError):
        decode_volume(buf + b"\0\0\0\0")


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(1, 6), st.integers(1, 6), st.integers(0, 10**6))
def test_codec_roundtrip_property(n, h, w, seed):
    cfg = SyntheticConfig(n_per_class=n, l_min=1, l_max=5, h=h, w=w)
    for v in generate_synthetic_dataset(cfg, seed):
        back = decode_volume(encode_volume(v), id=v.id)
        np.testing.assert_array_equal(back.slices, v.slices)


def test_dataset_roundtrip(tmp_path):
    ds = generate_synthetic_dataset(SyntheticConfig(n_per_class=3, h=4, w=4), seed=5)
    manifest = write_dataset(ds, tmp_path)
    back = read_dataset(manifest)
    assert back.volumes == ds.volumes
    first = manifest.read_text().splitlines()[0]
    assert set(__import__("json").loads(first)) == {"id", "path", "label", "length"}
