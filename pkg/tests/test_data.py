import struct

import numpy as np
import pytest

from marginforge.data import (DataError, Dataset, IdxFormatError, flip_labels,
                              load_idx, spiral_arm_points, split, subsample,
                              synthetic_digit_dataset, synthetic_digit_images,
                              toy_two_class, write_idx)


# -- toy generators ------------------------------------------------------------


def test_spiral_noise_free_points_on_arms():
    ds = toy_two_class(40, "spiral", noise_sigma=0.0, seed=5)
    arm0 = spiral_arm_points(40, 0)
    arm1 = spiral_arm_points(40, 1)
    np.testing.assert_allclose(ds.features[:40], np.clip(arm0, 0, 1), atol=1e-15)
    np.testing.assert_allclose(ds.features[40:], np.clip(arm1, 0, 1), atol=1e-15)


def test_toy_determinism_and_counts():
    for pattern in ("spiral", "checkerboard"):
        a = toy_two_class(25, pattern, 0.05, seed=3)
        b = toy_two_class(25, pattern, 0.05, seed=3)
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.labels, b.labels)
        assert int(np.sum(a.labels == 0)) == 25
        assert int(np.sum(a.labels == 1)) == 25
        assert a.features.min() >= 0.0 and a.features.max() <= 1.0
    c = toy_two_class(25, "spiral", 0.05, seed=4)
    assert not np.array_equal(a.features, c.features)


def test_toy_rejects_bad_pattern():
    with pytest.raises(DataError):
        toy_two_class(10, "moons", 0.0, seed=0)
    with pytest.raises(DataError):
        toy_two_class(0, "spiral", 0.0, seed=0)


def test_checkerboard_cells_label_parity():
    ds = toy_two_class(200, "checkerboard", 0.0, seed=9)
    cells = (np.floor(ds.features * 4).clip(0, 3)).astype(int)
    parity = (cells[:, 0] + cells[:, 1]) % 2
    np.testing.assert_array_equal(parity, ds.labels)


# -- IDX format ------------------------------------------------------------------


def _fixture(tmp_path, images, labels):
    ip = tmp_path / "imgs.idx3-ubyte"
    lp = tmp_path / "labs.idx1-ubyte"
    write_idx(images, labels, ip, lp)
    return ip, lp


def test_idx_roundtrip_hand_fixture(tmp_path):
    images = np.array([[[0, 51], [102, 255]],
                       [[255, 0], [10, 20]]], dtype=np.uint8)
    labels = np.array([3, 7], dtype=np.uint8)
    ip, lp = _fixture(tmp_path, images, labels)
    ds = load_idx(ip, lp)
    assert ds.features.shape == (2, 4)
    np.testing.assert_allclose(ds.features[0], [0, 51 / 255, 102 / 255, 1.0])
    np.testing.assert_array_equal(ds.labels, [3, 7])

    # byte-exact reconstruction of the image payload
    raw = ip.read_bytes()
    assert raw[:16] == struct.pack(">IIII", 0x803, 2, 2, 2)
    recon = np.round(ds.features * 255).astype(np.uint8).reshape(2, 2, 2)
    assert recon.tobytes() == raw[16:]


def test_idx_bad_magic(tmp_path):
    images = np.zeros((1, 2, 2), dtype=np.uint8)
    labels = np.zeros(1, dtype=np.uint8)
    ip, lp = _fixture(tmp_path, images, labels)
    # labels file with the image magic
    swapped = tmp_path / "bad-labels"
    swapped.write_bytes(struct.pack(">II", 0x803, 1) + b"\x00")
    with pytest.raises(IdxFormatError, match="bad magic"):
        load_idx(ip, swapped)
    with pytest.raises(IdxFormatError, match="bad magic"):
        load_idx(lp, lp)


def test_idx_truncation_reports_offset(tmp_path):
    images = np.zeros((3, 4, 4), dtype=np.uint8)
    labels = np.zeros(3, dtype=np.uint8)
    ip, lp = _fixture(tmp_path, images, labels)
    blob = ip.read_bytes()
    ip.write_bytes(blob[:-5])
    with pytest.raises(IdxFormatError, match="truncated"):
        load_idx(ip, lp)


def test_idx_count_mismatch(tmp_path):
    ip, _ = _fixture(tmp_path, np.zeros((2, 2, 2), dtype=np.uint8),
                     np.zeros(2, dtype=np.uint8))
    lp = tmp_path / "short-labels"
    lp.write_bytes(struct.pack(">II", 0x801, 1) + b"\x00")
    with pytest.raises(IdxFormatError, match="count mismatch"):
        load_idx(ip, lp)


# -- corruption -------------------------------------------------------------------


def _dataset(n=100, n_classes=5, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(rng.uniform(size=(n, 3)), rng.integers(0, n_classes, size=n),
                   n_classes, "test")


def test_flip_labels_identity_at_zero():
    ds = _dataset()
    out = flip_labels(ds, 0.0, seed=1)
    np.testing.assert_array_equal(out.labels, ds.labels)
    np.testing.assert_array_equal(out.features, ds.features)


def test_flip_labels_all_differ_at_one():
    ds = _dataset(n=500)
    out = flip_labels(ds, 1.0, seed=2)
    assert np.all(out.labels != ds.labels)
    assert np.all(out.labels < ds.n_classes)


def test_flip_labels_exact_count():
    ds = _dataset(n=1000)
    out = flip_labels(ds, 0.2, seed=3)
    assert int(np.sum(out.labels != ds.labels)) == 200


def test_flip_labels_rounding_half_up():
    ds = _dataset(n=10)
    out = flip_labels(ds, 0.25, seed=3)   # 2.5 -> 3
    assert int(np.sum(out.labels != ds.labels)) == 3


def test_flip_labels_pure_and_deterministic():
    ds = _dataset()
    before = ds.labels.copy()
    a = flip_labels(ds, 0.4, seed=9)
    b = flip_labels(ds, 0.4, seed=9)
    np.testing.assert_array_equal(ds.labels, before)
    np.testing.assert_array_equal(a.labels, b.labels)
    c = flip_labels(ds, 0.4, seed=10)
    assert not np.array_equal(a.labels, c.labels)


def test_subsample_identity_and_order():
    ds = _dataset()
    out = subsample(ds, 1.0, seed=4)
    np.testing.assert_array_equal(out.features, ds.features)
    np.testing.assert_array_equal(out.labels, ds.labels)
    half = subsample(ds, 0.5, seed=4)
    assert len(half) == 50
    # original order preserved: indices strictly increasing
    idx = [int(np.flatnonzero((ds.features == row).all(axis=1))[0])
           for row in half.features]
    assert idx == sorted(idx)


def test_subsample_round_half_up_and_floor_one():
    ds = _dataset(n=55000 // 10)  # 5500 samples
    out = subsample(ds, 0.00125, seed=0)  # 6.875 -> 7
    assert len(out) == 7
    tiny = subsample(_dataset(n=3), 0.01, seed=0)
    assert len(tiny) == 1


def test_subsample_deterministic():
    ds = _dataset()
    a = subsample(ds, 0.3, seed=8)
    b = subsample(ds, 0.3, seed=8)
    np.testing.assert_array_equal(a.features, b.features)


def test_split_partition_laws():
    ds = _dataset(n=60)
    train, val = split(ds, 10, seed=5)
    assert len(train) == 50 and len(val) == 10
    all_rows = np.vstack([train.features, val.features])
    assert len(np.unique(all_rows, axis=0)) == 60  # disjoint and covering
    t2, v2 = split(ds, 10, seed=5)
    np.testing.assert_array_equal(train.features, t2.features)


def test_split_holdout_zero_allowed():
    ds = _dataset(n=5)
    train, val = split(ds, 0, seed=0)
    assert len(train) == 5 and len(val) == 0
    with pytest.raises(DataError):
        split(ds, 5, seed=0)


def test_dataset_validation():
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 2)), np.array([0, 5]), 3, "bad-label")
    with pytest.raises(DataError):
        Dataset(np.full((2, 2), 1.5), np.array([0, 1]), 2, "out-of-range")
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 2)), np.array([0]), 2, "shape")


def test_dataset_csv_export(tmp_path):
    ds = _dataset(n=4)
    path = tmp_path / "ds.csv"
    ds.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "x0,x1,x2,label"
    assert len(lines) == 5
    parts = lines[1].split(",")
    assert float(parts[0]) == ds.features[0, 0]
    assert int(parts[-1]) == ds.labels[0]


# -- synthetic glyph digits -------------------------------------------------------


def test_synthetic_digits_deterministic_and_bounded():
    a, la = synthetic_digit_images(50, seed=11)
    b, lb = synthetic_digit_images(50, seed=11)
    assert a.tobytes() == b.tobytes()
    np.testing.assert_array_equal(la, lb)
    assert a.dtype == np.uint8 and a.shape == (50, 16, 16)
    assert la.min() >= 0 and la.max() <= 9


def test_synthetic_digit_dataset_roundtrips_idx(tmp_path):
    imgs, labels = synthetic_digit_images(30, seed=1)
    ip, lp = tmp_path / "i", tmp_path / "l"
    write_idx(imgs, labels, ip, lp)
    ds = load_idx(ip, lp)
    direct = synthetic_digit_dataset(30, seed=1)
    np.testing.assert_allclose(ds.features, direct.features, atol=1e-15)
    np.testing.assert_array_equal(ds.labels, direct.labels)
