"""Datasets, file ingestion and label-skewed partitioning."""

from __future__ import annotations

import gzip
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# IDX type codes -> big-endian numpy dtypes
_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


@dataclass(frozen=True)
class Dataset:
    """Feature matrix with one integer label per row."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        features = np.asarray(self.features, dtype=float)
        labels = np.asarray(self.labels)
        if features.ndim != 2:
            raise ValueError("features must be a 2-D array")
        if labels.shape != (features.shape[0],):
            raise ValueError("need exactly one label per sample")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.features[idx], self.labels[idx])


def synthetic_blobs(n_samples: int, n_features: int, seed: int = 0,
                    separation: float = 1.0, noise: float = 1.0) -> Dataset:
    """Two Gaussian clouds with labels 0/1, balanced up to one sample.

    The class means sit at ``+-separation/2`` along a random unit direction,
    so the Bayes error is controlled by ``separation / noise``.
    """
    if n_samples < 2 or n_features < 1:
        raise ValueError("need at least 2 samples and 1 feature")
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(n_features)
    direction /= np.linalg.norm(direction)
    labels = np.arange(n_samples) % 2
    labels = labels[rng.permutation(n_samples)]
    signs = 2.0 * labels - 1.0
    features = noise * rng.standard_normal((n_samples, n_features))
    features += 0.5 * separation * signs[:, None] * direction[None, :]
    return Dataset(features, labels)


def read_idx(path) -> np.ndarray:
    """Read an IDX file (optionally gzipped) into an array of its declared shape."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise ValueError(f"{path}: not an IDX file (bad magic)")
    code, ndim = raw[2], raw[3]
    if code not in _IDX_DTYPES:
        raise ValueError(f"{path}: unknown IDX type code {code:#x}")
    header = 4 + 4 * ndim
    dims = tuple(int(v) for v in np.frombuffer(raw[4:header], dtype=">u4"))
    dtype = _IDX_DTYPES[code]
    count = int(np.prod(dims)) if dims else 0
    if len(raw) - header < count * dtype.itemsize:
        raise ValueError(f"{path}: truncated payload")
    data = np.frombuffer(raw[header:header + count * dtype.itemsize], dtype=dtype)
    return data.reshape(dims).astype(dtype.newbyteorder("="))


def load_idx(images_path, labels_path, classes=None, scale: float = 255.0) -> Dataset:
    """Load an IDX image/label pair, flattening images and scaling pixels.

    ``classes`` restricts the dataset to the listed labels (e.g. ``(0, 1)``
    for a binary digit task).
    """
    images = read_idx(images_path)
    labels = read_idx(labels_path).astype(int)
    if images.shape[0] != labels.shape[0]:
        raise ValueError("image and label files disagree on sample count")
    features = images.reshape(images.shape[0], -1).astype(float) / scale
    if classes is not None:
        keep = np.isin(labels, list(classes))
        features, labels = features[keep], labels[keep]
    return Dataset(features, labels)


def load_csv(path) -> Dataset:
    """Read a CSV with a header row and the integer label in the last column."""
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if table.shape[1] < 2:
        raise ValueError(f"{path}: need at least one feature column and a label column")
    return Dataset(table[:, :-1], table[:, -1].astype(int))


@dataclass(frozen=True)
class PartitionSpec:
    n_agents: int
    heterogeneity: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_agents < 1:
            raise ValueError("n_agents must be positive")
        if not 0.0 <= self.heterogeneity <= 1.0:
            raise ValueError("heterogeneity must lie in [0, 1]")


def partition_dataset(dataset: Dataset, spec: PartitionSpec) -> list[np.ndarray]:
    """Split sample indices across agents with label skew ``spec.heterogeneity``.

    A ``heterogeneity`` fraction of a random permutation is sorted by label and
    cut into contiguous pieces, one per agent; the rest stays shuffled and is
    dealt out in near-equal pieces. Pieces are paired so that shard sizes
    differ by at most one.
    """
    m = len(dataset)
    n = spec.n_agents
    if n > m:
        raise ValueError(f"cannot split {m} samples across {n} agents")
    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(m)
    n_sorted = int(round(spec.heterogeneity * m))
    skewed = perm[:n_sorted]
    skewed = skewed[np.argsort(dataset.labels[skewed], kind="stable")]
    uniform = perm[n_sorted:]
    skewed_parts = np.array_split(skewed, n)
    # larger uniform pieces go to agents that got the smaller skewed pieces
    uniform_parts = np.array_split(uniform, n)[::-1]
    return [np.sort(np.concatenate([a, b])).astype(int)
            for a, b in zip(skewed_parts, uniform_parts)]
