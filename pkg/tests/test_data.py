import gzip
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from csrobust.cost import make_task, target_sets
from csrobust.data import (DataFormatError, Dataset, load_cifar10, load_csv_dataset, load_mnist_idx,
                           split_folds, stratified_subsample, synth_blobs, write_idx_images,
                           write_idx_labels)
from csrobust.numcore import Rng


def idx_fixture(tmp_path, gz=False):
    pixels = np.array([np.arange(4, dtype=np.uint8) * 85, [255, 0, 17, 200]], dtype=np.uint8)
    ext = ".gz" if gz else ""
    write_idx_images(tmp_path / f"img{ext}", pixels, rows=2, cols=2)
    write_idx_labels(tmp_path / f"lab{ext}", [3, 7])
    return pixels, tmp_path / f"img{ext}", tmp_path / f"lab{ext}"


@pytest.mark.parametrize("gz", [False, True])
def test_idx_round_trip(tmp_path, gz):
    pixels, img, lab = idx_fixture(tmp_path, gz)
    ds = load_mnist_idx(img, lab)
    assert ds.X.shape == (2, 4) and ds.y.tolist() == [3, 7]
    assert np.array_equal(np.rint(ds.X * 255).astype(np.uint8), pixels)
    assert ds.X[1, 0] == 1.0


def test_idx_layout_is_big_endian(tmp_path):
    _, img, lab = idx_fixture(tmp_path)
    raw = img.read_bytes()
    assert struct.unpack(">IIII", raw[:16]) == (0x803, 2, 2, 2)
    assert struct.unpack(">II", lab.read_bytes()[:8]) == (0x801, 2)


def test_idx_swapped_magic(tmp_path):
    _, img, lab = idx_fixture(tmp_path)
    with pytest.raises(DataFormatError, match="magic"):
        load_mnist_idx(lab, img)


def test_idx_truncated(tmp_path):
    _, img, lab = idx_fixture(tmp_path)
    (tmp_path / "short").write_bytes(img.read_bytes()[:-1])
    with pytest.raises(DataFormatError):
        load_mnist_idx(tmp_path / "short", lab)
    (tmp_path / "hdr").write_bytes(img.read_bytes()[:7])
    with pytest.raises(DataFormatError):
        load_mnist_idx(tmp_path / "hdr", lab)


def test_idx_count_mismatch(tmp_path):
    _, img, _ = idx_fixture(tmp_path)
    write_idx_labels(tmp_path / "lab3", [1, 2, 3])
    with pytest.raises(DataFormatError, match="labels"):
        load_mnist_idx(img, tmp_path / "lab3")


def test_bundled_subset_requantizes_exactly():
    from pathlib import Path
    root = Path(__file__).resolve().parents[1] / "data"
    img = root / "mnist-npm-images-idx3-ubyte.gz"
    ds = load_mnist_idx(img, root / "mnist-npm-labels-idx1-ubyte.gz")
    raw = gzip.decompress(img.read_bytes())[16:]
    assert np.array_equal(np.rint(ds.X * 255).astype(np.uint8).ravel(), np.frombuffer(raw, np.uint8))
    assert len(ds) == 10000 and ds.n_classes == 10


def test_cifar_records(tmp_path):
    rec = np.zeros((3, 3073), dtype=np.uint8)
    rec[:, 0] = [0, 9, 4]
    rec[1, 1:] = 255
    (tmp_path / "b.bin").write_bytes(rec.tobytes())
    ds = load_cifar10([tmp_path / "b.bin"])
    assert ds.y.tolist() == [0, 9, 4] and ds.X.shape == (3, 3072) and ds.X[1].min() == 1.0
    (tmp_path / "bad.bin").write_bytes(rec.tobytes()[:-1])
    with pytest.raises(DataFormatError):
        load_cifar10([tmp_path / "bad.bin"])


def test_dataset_invariants():
    with pytest.raises(DataFormatError):
        Dataset(np.zeros((2, 3)), np.zeros(3), 2)
    with pytest.raises(DataFormatError):
        Dataset(np.full((1, 3), 1.5), np.zeros(1), 2)
    with pytest.raises(DataFormatError):
        Dataset(np.zeros((1, 3)), np.array([2]), 2)


# -- synthetic blobs ---------------------------------------------------------------


def test_blobs_zero_spread():
    ds = synth_blobs(Rng(0), 4, 3, 5, 0.0)
    for c in range(4):
        pts = ds.X[ds.y == c]
        assert np.all(pts == pts[0])
    assert np.all((ds.X >= 0.2) & (ds.X <= 0.8))


def test_blobs_deterministic():
    a, b = synth_blobs(Rng(5), 3, 2, 20, 0.1), synth_blobs(Rng(5), 3, 2, 20, 0.1)
    assert np.array_equal(a.X, b.X) and np.array_equal(a.y, b.y)


def test_blobs_two_classes_separable():
    from sklearn.linear_model import LogisticRegression
    ds = synth_blobs(Rng(1), 2, 2, 200, 0.02)
    probe = LogisticRegression(C=1e4).fit(ds.X, ds.y)
    assert probe.score(ds.X, ds.y) == 1.0


def test_blobs_distinct_means():
    ds = synth_blobs(Rng(0), 10, 2, 1, 0.0)
    assert len(np.unique(ds.X, axis=0)) == 10


def test_blobs_csv_round_trip(tmp_path):
    ds = synth_blobs(Rng(2), 3, 4, 5, 0.1)
    ds.to_csv(tmp_path / "d.csv")
    back = load_csv_dataset(tmp_path / "d.csv", 3)
    assert np.array_equal(back.X, ds.X) and np.array_equal(back.y, ds.y)


# -- folds ---------------------------------------------------------------------------


def test_folds_even():
    assert split_folds(10, 5, Rng(0)).fold_sizes().tolist() == [2] * 5


def test_folds_uneven():
    assert sorted(split_folds(11, 5, Rng(0)).fold_sizes().tolist()) == [2, 2, 2, 2, 3]


def test_folds_deterministic_and_dataset_input():
    ds = synth_blobs(Rng(0), 2, 2, 10, 0.1)
    a, b = split_folds(ds, 5, Rng(4)), split_folds(20, 5, Rng(4))
    assert np.array_equal(a.assignment, b.assignment)


def test_folds_errors():
    with pytest.raises(ValueError):
        split_folds(3, 5, Rng(0))
    with pytest.raises(ValueError):
        split_folds(10, 1, Rng(0))


@given(st.integers(2, 500), st.integers(2, 10), st.integers(0, 10**6))
def test_folds_partition(n, k, seed):
    if n < k:
        return
    f = split_folds(n, k, Rng(seed))
    sizes = f.fold_sizes()
    assert sizes.sum() == n and sizes.max() - sizes.min() <= 1
    tr, va = f.train_indices(), f.val_indices()
    assert len(np.intersect1d(tr, va)) == 0 and len(tr) + len(va) == n


def test_class_counts_agree_with_target_sets():
    ds = synth_blobs(Rng(3), 10, 3, 7, 0.1)
    ts = target_sets(make_task("small-large", 10), ds.y)
    assert np.array_equal(ts.counts, ds.class_counts())


def test_stratified_subsample():
    ds = synth_blobs(Rng(3), 4, 2, 30, 0.1)
    a = stratified_subsample(ds, 40, Rng(0))
    assert np.bincount(ds.y[a]).tolist() == [10] * 4
    b = stratified_subsample(ds, 40, Rng(1), exclude=a)
    assert len(np.intersect1d(a, b)) == 0
    with pytest.raises(ValueError):
        stratified_subsample(ds, 200, Rng(0))
