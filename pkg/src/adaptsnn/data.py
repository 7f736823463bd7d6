"""Datasets: MNIST IDX files, labelled CSV, synthetic Gaussian streams, and a
binary cache format."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensorio
from .tensor import split_rngs

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MNIST_MEAN, MNIST_STD = 0.1307, 0.3081

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxParseError(ValueError):
    pass


@dataclass
class Dataset:
    samples: np.ndarray  # (N, features) float64
    labels: np.ndarray  # (N,) int64
    normalization: tuple[float, float] = (0.0, 1.0)
    feature_shape: tuple = ()
    num_classes: int = 0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.samples.ndim != 2:
            self.samples = self.samples.reshape(len(self.samples), -1)
        if len(self.samples) != len(self.labels):
            raise ValueError(f"{len(self.samples)} samples but {len(self.labels)} labels")
        if not self.feature_shape:
            self.feature_shape = (self.samples.shape[1],)
        if not self.num_classes:
            self.num_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)


@dataclass
class SyntheticGaussianSpec:
    mu: float = 0.0
    sigma: float = 1.0
    dims: tuple = (2,)
    n: int = 1000
    seed: int = 0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        self.dims = tuple(self.dims) if not isinstance(self.dims, int) else (self.dims,)


def _open(path):
    path = Path(path)
    if not path.exists() and path.with_name(path.name + ".gz").exists():
        path = path.with_name(path.name + ".gz")
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(buf: bytes, magic: int, ndim: int, path) -> np.ndarray:
    if len(buf) < 4:
        raise IdxParseError(f"{path}: truncated header at offset {len(buf)}")
    (got,) = struct.unpack(">I", buf[:4])
    if got != magic:
        raise IdxParseError(f"{path}: bad magic 0x{got:08x} at offset 0, expected 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise IdxParseError(f"{path}: truncated header at offset {len(buf)}")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    need = int(np.prod(dims))
    if len(buf) - header < need:
        raise IdxParseError(
            f"{path}: truncated data at offset {len(buf)}, expected {header + need} bytes"
        )
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=header).reshape(dims)


def load_idx(images_path, labels_path, normalization="dataset") -> Dataset:
    """Load an IDX image/label pair (optionally gzipped).

    Pixels are scaled to [0, 1] and then standardized: ``"dataset"`` uses the
    file's own mean/std, ``"mnist"`` the conventional MNIST constants, a
    ``(mean, std)`` pair is used as given, ``None`` keeps [0, 1].
    """
    images = _parse_idx(_open(images_path), IDX_IMAGES_MAGIC, 3, images_path)
    labels = _parse_idx(_open(labels_path), IDX_LABELS_MAGIC, 1, labels_path)
    if len(images) != len(labels):
        raise IdxParseError(
            f"{labels_path}: count mismatch at offset 4: {len(labels)} labels for {len(images)} images"
        )
    x = images.reshape(len(images), int(np.prod(images.shape[1:]))).astype(np.float64) / 255.0
    if normalization == "dataset":
        norm = (float(x.mean()), float(x.std())) if x.size else (0.0, 1.0)
    elif normalization == "mnist":
        norm = (MNIST_MEAN, MNIST_STD)
    elif normalization is None:
        norm = (0.0, 1.0)
    else:
        norm = tuple(map(float, normalization))
    if norm[1] > 0:
        x = (x - norm[0]) / norm[1]
    h, w = images.shape[1:]
    return Dataset(x, labels.astype(np.int64), norm, (1, h, w), num_classes=10)


def load_mnist(data_dir, split: str = "train", normalization="mnist") -> Dataset:
    img, lab = MNIST_FILES[split]
    d = Path(data_dir)
    return load_idx(d / img, d / lab, normalization)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as an IDX file (3-d images or 1-d labels)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = {3: IDX_IMAGES_MAGIC, 1: IDX_LABELS_MAGIC}.get(array.ndim)
    if magic is None:
        raise ValueError("IDX writer handles 1-d label or 3-d image arrays")
    header = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    with open(path, "wb") as f:
        f.write(header + array.tobytes())


def load_csv(path, normalization=None) -> Dataset:
    """CSV with a ``label,f0,f1,...`` header row."""
    with open(path) as f:
        header = f.readline().strip().split(",")
    if not header or header[0] != "label" or any(h != f"f{i}" for i, h in enumerate(header[1:])):
        raise ValueError(f"{path}: header must be 'label,f0,f1,...'")
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if table.size == 0:
        return Dataset(np.zeros((0, len(header) - 1)), np.zeros(0, dtype=np.int64))
    labels = table[:, 0]
    if not np.all(labels == np.round(labels)):
        raise ValueError(f"{path}: non-integer labels")
    x = table[:, 1:]
    norm = (0.0, 1.0)
    if normalization == "dataset":
        norm = (float(x.mean()), float(x.std()))
        if norm[1] > 0:
            x = (x - norm[0]) / norm[1]
    return Dataset(x, labels.astype(np.int64), norm)


def batch_iter(ds: Dataset, batch_size: int, shuffle: bool = False, rng: np.random.Generator | None = None):
    """Yield (samples, labels) mini-batches; the last one may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(ds)
    if shuffle:
        if rng is None:
            raise ValueError("shuffling needs an rng")
        order = rng.permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield ds.samples[idx], ds.labels[idx]


def synth_gaussian(spec: SyntheticGaussianSpec) -> Dataset:
    """Draws from N(mu, sigma^2) per feature, labelled by which side of a
    fixed random hyperplane through (mu, ..., mu) they fall on."""
    streams = split_rngs(spec.seed, ["hyperplane", "samples"])
    d = int(np.prod(spec.dims))
    normal = streams["hyperplane"].standard_normal(d)
    x = streams["samples"].normal(spec.mu, spec.sigma, size=(spec.n, d))
    labels = ((x - spec.mu) @ normal > 0).astype(np.int64)
    return Dataset(x, labels, (0.0, 1.0), spec.dims, num_classes=2)


def save_cache(ds: Dataset, path) -> None:
    tensorio.write_blocks(
        path,
        "dataset",
        {
            "samples": ds.samples,
            "labels": ds.labels,
            "normalization": np.array(ds.normalization, dtype=np.float64),
            "feature_shape": np.array(ds.feature_shape, dtype=np.int64),
            "num_classes": np.array([ds.num_classes], dtype=np.int64),
        },
    )


def load_cache(path) -> Dataset:
    b = tensorio.read_blocks(path, "dataset")
    return Dataset(
        b["samples"],
        b["labels"],
        tuple(float(v) for v in b["normalization"]),
        tuple(int(v) for v in b["feature_shape"]),
        int(b["num_classes"][0]),
    )
