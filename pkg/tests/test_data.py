import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from svmax_lab.data import (DATA_DIR_ENV, Dataset, gaussian_ring, hypersphere_classes, load_mnist,
                            mnist_available, parse_idx, ring_centers, sample_batch, sample_batch_indices)
from svmax_lab.errors import BatchComposition, FormatError, InvalidInput, MissingData, TruncatedFile
from svmax_lab.rng import Rng


def idx_labels(values):
    return struct.pack(">II", 0x801, len(values)) + bytes(values)


def idx_images(n, rows, cols, values):
    return struct.pack(">IIII", 0x803, n, rows, cols) + bytes(values)


def test_ring_geometry():
    c = ring_centers(8, 2.0)
    np.testing.assert_allclose(c[0], [2.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(c[2], [0.0, 2.0], atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(c, axis=1), 2.0, atol=1e-12)


def test_ring_tiny_sigma():
    ds = gaussian_ring(8, 2.0, 1e-9, 500, Rng(1))
    assert np.max(np.linalg.norm(ds.samples - ring_centers()[ds.labels], axis=1)) < 1e-6


def test_ring_moments():
    ds = gaussian_ring(8, 2.0, 0.05, 8000, Rng(2))
    centers = ring_centers()
    for k in range(8):
        pts = ds.samples[ds.labels == k]
        assert np.all(np.abs(pts.mean(axis=0) - centers[k]) < 0.01)
        assert np.all(np.abs(pts.std(axis=0) / 0.05 - 1.0) < 0.2)


def test_ring_uniform_priors():
    ds = gaussian_ring(8, 2.0, 0.05, 80000, Rng(3))
    freq = np.bincount(ds.labels, minlength=8) / 80000
    assert np.all(np.abs(freq - 1 / 8) <= 0.01)


def test_ring_validation():
    with pytest.raises(InvalidInput):
        gaussian_ring(0, 2.0, 0.05, 10, Rng(0))
    with pytest.raises(InvalidInput):
        gaussian_ring(8, 2.0, 0.0, 10, Rng(0))


def test_generators_deterministic():
    a, b = gaussian_ring(rng=Rng(4), n=100), gaussian_ring(rng=Rng(4), n=100)
    assert np.array_equal(a.samples, b.samples) and np.array_equal(a.labels, b.labels)
    h1 = hypersphere_classes(5, 8, 0.1, 10, Rng(5))
    h2 = hypersphere_classes(5, 8, 0.1, 10, Rng(5))
    assert np.array_equal(h1.samples, h2.samples)


def test_hypersphere_tiny_spread():
    rng = Rng(6)
    centers = rng.normal(size=(4, 6))
    ds = hypersphere_classes(4, 6, 1e-9, 20, rng, centers)
    unit = centers / np.linalg.norm(centers, axis=1, keepdims=True)
    assert np.max(np.linalg.norm(ds.samples - unit[ds.labels], axis=1)) < 1e-6


def test_hypersphere_antipodal_nearest_center():
    centers = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
    ds = hypersphere_classes(2, 3, 0.05, 500, Rng(7), centers)
    pred = np.argmax(ds.samples @ centers.T, axis=1)
    assert np.all(pred == ds.labels)


def test_hypersphere_unit_rows_and_validation():
    ds = hypersphere_classes(6, 5, 0.5, 30, Rng(8))
    np.testing.assert_allclose(np.linalg.norm(ds.samples, axis=1), 1.0, atol=1e-12)
    with pytest.raises(InvalidInput):
        hypersphere_classes(1, 5, 0.1, 3, Rng(0))
    with pytest.raises(InvalidInput):
        hypersphere_classes(3, 5, 0.1, 3, Rng(0), centers=np.ones((2, 5)))


def test_sample_batch_examples():
    ds = hypersphere_classes(10, 4, 0.1, 8, Rng(9))
    b = sample_batch(ds, 10, 1, Rng(10))
    assert sorted(b.labels.tolist()) == list(range(10))
    big = hypersphere_classes(30, 4, 0.1, 8, Rng(11))
    assert sample_batch(big, 24, 6, Rng(12)).b == 144


def test_sample_batch_deterministic():
    ds = hypersphere_classes(10, 4, 0.1, 8, Rng(13))
    r1, r2 = Rng(14), Rng(14)
    for _ in range(5):
        assert np.array_equal(sample_batch_indices(ds, 4, 3, r1), sample_batch_indices(ds, 4, 3, r2))


def test_sample_batch_errors():
    ds = hypersphere_classes(3, 4, 0.1, 2, Rng(15))
    with pytest.raises(BatchComposition):
        sample_batch(ds, 4, 1, Rng(0))
    with pytest.raises(BatchComposition):
        sample_batch(ds, 2, 3, Rng(0))
    with pytest.raises(BatchComposition):
        sample_batch(ds, 0, 1, Rng(0))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(1, 5), st.integers(0, 2**32))
def test_sample_batch_composition(p, l, seed):
    ds = hypersphere_classes(8, 3, 0.1, 5, Rng(seed))
    idx = sample_batch_indices(ds, p, l, Rng(seed + 1))
    assert idx.size == p * l and np.unique(idx).size == idx.size
    _, counts = np.unique(ds.labels[idx], return_counts=True)
    assert counts.size == p and np.all(counts == l)


def test_dataset_validation_and_split():
    with pytest.raises(InvalidInput):
        Dataset(np.zeros((3, 2)), [0, 1], 2)
    with pytest.raises(InvalidInput):
        Dataset(np.zeros((2, 2)), [0, 2], 2)
    ds = hypersphere_classes(6, 3, 0.1, 4, Rng(16))
    a, b = ds.split_classes(4)
    assert a.class_count == 4 and b.class_count == 2
    assert len(a) == 16 and sorted(set(b.labels.tolist())) == [0, 1]


def test_csv_round_trip(tmp_path):
    ds = gaussian_ring(n=50, rng=Rng(17))
    path = tmp_path / "d.csv"
    ds.to_csv(path)
    assert path.read_text().splitlines()[0] == "label,x0,x1"
    back = Dataset.from_csv(path, 8)
    assert np.array_equal(back.samples, ds.samples) and np.array_equal(back.labels, ds.labels)


def test_csv_errors(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("x0,label\n1,2\n")
    with pytest.raises(FormatError):
        Dataset.from_csv(bad)
    bad.write_text("label,x0\n1,2,3\n")
    with pytest.raises(FormatError):
        Dataset.from_csv(bad)
    bad.write_text("label,x0\n1,abc\n")
    with pytest.raises(FormatError):
        Dataset.from_csv(bad)


def test_parse_idx_labels():
    np.testing.assert_array_equal(parse_idx(idx_labels([3, 7])), [3, 7])


def test_parse_idx_images():
    out = parse_idx(idx_images(1, 2, 2, [0, 255, 128, 64]))
    np.testing.assert_allclose(out, [[0.0, 1.0, 0.50196, 0.25098]], atol=1e-5)


@pytest.mark.parametrize("buf,err", [
    (b"\x00\x00", TruncatedFile),
    (struct.pack(">I", 0x802) + b"\x00" * 8, FormatError),
    (struct.pack(">I", 0x803) + b"\x00" * 4, TruncatedFile),
    (idx_labels([1, 2, 3])[:-1], TruncatedFile),
    (idx_labels([1, 2]) + b"\x09", FormatError),
])
def test_parse_idx_errors(buf, err):
    with pytest.raises(err):
        parse_idx(buf)


def write_fake_mnist(d, n=3, gz=False):
    rng = Rng(18)
    for split in ("train", "t10k"):
        imgs = idx_images(n, 28, 28, rng.integers(256, size=n * 784).tolist())
        labs = idx_labels(rng.integers(10, size=n).tolist())
        for name, buf in ((f"{split}-images-idx3-ubyte", imgs), (f"{split}-labels-idx1-ubyte", labs)):
            if gz:
                with gzip.open(d / (name + ".gz"), "wb") as fh:
                    fh.write(buf)
            else:
                (d / name).write_bytes(buf)


@pytest.mark.parametrize("gz", [False, True])
def test_load_mnist_from_env(tmp_path, monkeypatch, gz):
    write_fake_mnist(tmp_path, gz=gz)
    monkeypatch.setenv(DATA_DIR_ENV, str(tmp_path))
    assert mnist_available()
    ds = load_mnist("t10k")
    assert ds.samples.shape == (3, 784) and ds.class_count == 10


def test_load_mnist_missing(tmp_path):
    assert not mnist_available(tmp_path)
    with pytest.raises(MissingData, match=DATA_DIR_ENV):
        load_mnist("train", tmp_path)


@pytest.mark.skipif(not mnist_available(), reason="MNIST files not present")
def test_real_mnist_train():
    ds = load_mnist("train")
    assert ds.samples.shape == (60000, 784)
