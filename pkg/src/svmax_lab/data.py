"""Seeded synthetic datasets, the (p, l) batch sampler and MNIST IDX parsing."""
import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BatchComposition, FormatError, InvalidInput, MissingData, TruncatedFile
from .losses import LabeledBatch

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
DATA_DIR_ENV = "SVMAX_DATA_DIR"


@dataclass
class Dataset:
    samples: np.ndarray
    labels: np.ndarray
    class_count: int
    _by_class: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.samples.shape[0] != self.labels.shape[0]:
            raise InvalidInput("samples and labels differ in length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise InvalidInput("label ids must lie in [0, class_count)")

    def __len__(self):
        return self.samples.shape[0]

    def class_indices(self):
        if self._by_class is None:
            self._by_class = {c: np.flatnonzero(self.labels == c) for c in range(self.class_count)}
        return self._by_class

    def subset(self, idx):
        return Dataset(self.samples[idx], self.labels[idx], self.class_count)

    def split_classes(self, n_first):
        """Split into classes [0, n_first) and the remaining classes (relabelled from 0)."""
        first = self.labels < n_first
        rest = Dataset(self.samples[~first], self.labels[~first] - n_first, self.class_count - n_first)
        return Dataset(self.samples[first], self.labels[first], n_first), rest

    def to_csv(self, path):
        """Write ``label,x0,x1,...`` rows with round-trip float precision."""
        header = "label," + ",".join(f"x{k}" for k in range(self.samples.shape[1]))
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for label, row in zip(self.labels, self.samples):
                fh.write(str(int(label)) + "," + ",".join(repr(float(v)) for v in row) + "\n")

    @classmethod
    def from_csv(cls, path, class_count=None):
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            if not header or header[0] != "label":
                raise FormatError(f"{path}: first column must be 'label'")
            rows = [line.strip().split(",") for line in fh if line.strip()]
        if any(len(r) != len(header) for r in rows):
            raise FormatError(f"{path}: ragged rows")
        try:
            labels = np.array([int(r[0]) for r in rows], dtype=np.int64)
            samples = np.array([[float(v) for v in r[1:]] for r in rows], dtype=np.float64)
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from None
        samples = samples.reshape(len(rows), len(header) - 1)
        if class_count is None:
            class_count = int(labels.max()) + 1 if labels.size else 0
        return cls(samples, labels, class_count)


def ring_centers(modes=8, radius=2.0):
    angles = 2.0 * np.pi * np.arange(modes) / modes
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def gaussian_ring(modes=8, radius=2.0, sigma=0.05, n=10000, rng=None):
    """Equal-weight mixture of isotropic 2D Gaussians with centers on a circle."""
    if modes < 1 or sigma <= 0:
        raise InvalidInput("need modes >= 1 and sigma > 0")
    labels = rng.integers(modes, size=n)
    noise = rng.normal(size=(n, 2))
    samples = ring_centers(modes, radius)[labels] + sigma * noise
    return Dataset(samples, labels, modes)


def hypersphere_classes(classes, dim, spread, n_per_class, rng, centers=None):
    """Unit-norm samples scattered around class centers drawn uniformly on the sphere."""
    if classes < 2 or dim < 2 or spread <= 0:
        raise InvalidInput("need classes >= 2, dim >= 2 and spread > 0")
    if centers is None:
        centers = rng.normal(size=(classes, dim))
    centers = np.asarray(centers, dtype=np.float64)
    if centers.shape != (classes, dim):
        raise InvalidInput(f"centers must have shape {(classes, dim)}")
    centers = centers / np.linalg.norm(centers, axis=1, keepdims=True)
    labels = np.repeat(np.arange(classes), n_per_class)
    x = centers[labels] + spread * rng.normal(size=(labels.size, dim))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return Dataset(x, labels, classes)


def sample_batch_indices(ds, p, l, rng):
    """Row indices of a batch with p distinct classes and l distinct samples each."""
    by_class = ds.class_indices()
    eligible = np.array([c for c in range(ds.class_count) if by_class[c].size >= l])
    if p < 1 or l < 1:
        raise BatchComposition("p and l must be positive")
    if eligible.size < p:
        raise BatchComposition(f"only {eligible.size} classes have {l} samples; need {p}")
    chosen = eligible[rng.sample(eligible.size, p)]
    return np.concatenate([by_class[c][rng.sample(by_class[c].size, l)] for c in chosen])


def sample_batch(ds, p, l, rng):
    idx = sample_batch_indices(ds, p, l, rng)
    return LabeledBatch(ds.samples[idx], ds.labels[idx], p, l)


def parse_idx(buf):
    """Decode an unsigned-byte IDX file: images -> (n, rows*cols) in [0, 1], labels -> int ids."""
    buf = bytes(buf)
    if len(buf) < 4:
        raise TruncatedFile("IDX header is shorter than its magic number")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic not in (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC):
        raise FormatError(f"unsupported IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise TruncatedFile("IDX dimension header is incomplete")
    dims = struct.unpack(">" + "I" * ndim, buf[4:header])
    size = int(np.prod(dims))
    if len(buf) < header + size:
        raise TruncatedFile(f"IDX payload has {len(buf) - header} bytes, header promises {size}")
    if len(buf) > header + size:
        raise FormatError("trailing bytes after the IDX payload")
    payload = np.frombuffer(buf, dtype=np.uint8, count=size, offset=header)
    if magic == IDX_LABELS_MAGIC:
        return payload.astype(np.int64)
    return payload.reshape(dims[0], dims[1] * dims[2]).astype(np.float64) / 255.0


def _read_maybe_gz(path):
    for candidate in (path, path.with_name(path.name + ".gz")):
        if candidate.exists():
            opener = gzip.open if candidate.suffix == ".gz" else open
            with opener(candidate, "rb") as fh:
                return fh.read()
    return None


def mnist_dir(data_dir=None):
    return Path(data_dir or os.environ.get(DATA_DIR_ENV, "."))


def mnist_available(data_dir=None):
    d = mnist_dir(data_dir)
    names = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
             "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")
    return all((d / n).exists() or (d / (n + ".gz")).exists() for n in names)


def load_mnist(split="train", data_dir=None):
    """Load the MNIST `split` ('train' or 't10k') from `data_dir` or $SVMAX_DATA_DIR."""
    d = mnist_dir(data_dir)
    images = _read_maybe_gz(d / f"{split}-images-idx3-ubyte")
    labels = _read_maybe_gz(d / f"{split}-labels-idx1-ubyte")
    if images is None or labels is None:
        raise MissingData(
            f"MNIST {split} files not found in {d}. Download train/t10k images and labels "
            f"(*-idx3-ubyte, *-idx1-ubyte, optionally .gz) and set {DATA_DIR_ENV} to their directory."
        )
    return Dataset(parse_idx(images), parse_idx(labels), 10)
