"""Labeled datasets: Gaussian synthetic tasks and stratified MNIST/CIFAR-10 subsets.

All inputs live in [0, 1] so an L-infinity budget means the same thing at the
model input as in pixel space.

Local dataset layout under ``$DATASET_ROOT`` (default ``./data``)::

    mnist/mnist.npz                      x_train, y_train, x_test, y_test (uint8)
    mnist/train-images-idx3-ubyte[.gz]   or the four raw IDX files
    cifar10/cifar-10-batches-py/         data_batch_1..5, test_batch (python pickles)
"""
from __future__ import annotations

import gzip
import os
import pickle
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch


class DataError(RuntimeError):
    pass


@dataclass(frozen=True)
class Dataset:
    x: torch.Tensor
    y: torch.Tensor
    num_classes: int
    name: str = ""

    def __post_init__(self):
        if self.x.shape[0] != self.y.shape[0]:
            raise ValueError("inputs and labels differ in length")

    def __len__(self) -> int:
        return self.y.shape[0]

    @property
    def input_shape(self) -> tuple:
        return tuple(self.x.shape[1:])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y.numpy(), minlength=self.num_classes)

    def subset(self, idx) -> "Dataset":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return Dataset(self.x[idx], self.y[idx], self.num_classes, self.name)


def dataset_root(root=None) -> Path:
    return Path(root or os.environ.get("DATASET_ROOT", "data"))


# ---------------------------------------------------------------------------
# synthetic Gaussian tasks


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Isotropic Gaussian classes; a class is harder the wider its spread
    relative to the distance to the nearest other class mean."""

    means: tuple
    scales: tuple
    samples_per_class: int = 500

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        scales = np.asarray(self.scales, dtype=np.float64)
        if means.ndim != 2 or means.shape[0] < 2:
            raise ValueError("means must be a (classes, dim) array with at least 2 classes")
        if scales.shape != (means.shape[0],):
            raise ValueError("one scale per class is required")
        if (scales <= 0).any():
            raise DataError("degenerate covariance: every class scale must be positive")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be positive")
        diff = self.difficulty()
        if np.allclose(diff, diff[0]):
            raise ValueError("synthetic task needs at least one class harder than the others")
        object.__setattr__(self, "means", tuple(map(tuple, means.tolist())))
        object.__setattr__(self, "scales", tuple(scales.tolist()))

    @property
    def num_classes(self) -> int:
        return len(self.means)

    @property
    def dim(self) -> int:
        return len(self.means[0])

    def margins(self) -> np.ndarray:
        """Distance from each class mean to the nearest other class mean."""
        m = np.asarray(self.means)
        d = np.linalg.norm(m[:, None] - m[None], axis=-1)
        np.fill_diagonal(d, np.inf)
        return d.min(1)

    def difficulty(self) -> np.ndarray:
        return np.asarray(self.scales) / self.margins()

    @property
    def hard_class(self) -> int:
        return int(np.argmax(self.difficulty()))

    @classmethod
    def two_class(
        cls, dim: int = 8, offset: float = 0.1, scale_hard: float = 0.3, scale_easy: float = 0.15, samples_per_class: int = 500
    ) -> "SyntheticTaskSpec":
        """Two classes centred at ``0.5 -/+ offset``; class 0 is the hard one."""
        means = [[0.5 - offset] * dim, [0.5 + offset] * dim]
        return cls(means=means, scales=[scale_hard, scale_easy], samples_per_class=samples_per_class)

    def to_dict(self) -> dict:
        return {"means": [list(m) for m in self.means], "scales": list(self.scales),
                "samples_per_class": self.samples_per_class}


_SPLIT_STREAM = {"train": 0, "test": 1}


def make_synthetic(spec: SyntheticTaskSpec, seed: int, split: str = "train") -> Dataset:
    """Balanced Gaussian samples, clipped to [0, 1]; deterministic per (seed, split)."""
    if split not in _SPLIT_STREAM:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    rng = np.random.default_rng([seed, _SPLIT_STREAM[split]])
    xs, ys = [], []
    for c, (mean, scale) in enumerate(zip(spec.means, spec.scales)):
        pts = rng.normal(loc=mean, scale=scale, size=(spec.samples_per_class, spec.dim))
        xs.append(pts)
        ys.append(np.full(spec.samples_per_class, c))
    x = np.clip(np.concatenate(xs), 0.0, 1.0).astype(np.float32)
    y = np.concatenate(ys).astype(np.int64)
    return Dataset(torch.from_numpy(x), torch.from_numpy(y), spec.num_classes, f"synthetic-{split}")


def save_dataset(ds: Dataset, path) -> None:
    """Columnar ``.npz``: one array per column (``x``, ``y``) plus the class count."""
    np.savez(path, x=ds.x.numpy(), y=ds.y.numpy(), num_classes=np.int64(ds.num_classes), name=np.str_(ds.name))


def load_dataset(path) -> Dataset:
    with np.load(path) as f:
        return Dataset(torch.from_numpy(f["x"]), torch.from_numpy(f["y"]), int(f["num_classes"]), str(f["name"]))


# ---------------------------------------------------------------------------
# image subsets


def _read_idx(path: Path) -> np.ndarray:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        data = fh.read()
    ndim = data[3]
    dims = [int.from_bytes(data[4 + 4 * i: 8 + 4 * i], "big") for i in range(ndim)]
    return np.frombuffer(data, dtype=np.uint8, offset=4 + 4 * ndim).reshape(dims)


def _find(base: Path, stem: str) -> Path | None:
    for cand in (base / stem, base / (stem + ".gz")):
        if cand.exists():
            return cand
    return None


def _load_mnist(root: Path, split: str):
    base = root / "mnist"
    npz = base / "mnist.npz"
    if npz.exists():
        with np.load(npz) as f:
            return f[f"x_{split}"], f[f"y_{split}"]
    prefix = "train" if split == "train" else "t10k"
    images = _find(base, f"{prefix}-images-idx3-ubyte")
    labels = _find(base, f"{prefix}-labels-idx1-ubyte")
    if images is None or labels is None:
        raise DataError(f"MNIST files not found under {base} (expected mnist.npz or IDX files)")
    return _read_idx(images), _read_idx(labels)


def _load_cifar10(root: Path, split: str):
    base = root / "cifar10" / "cifar-10-batches-py"
    names = [f"data_batch_{i}" for i in range(1, 6)] if split == "train" else ["test_batch"]
    xs, ys = [], []
    for n in names:
        p = base / n
        if not p.exists():
            raise DataError(f"CIFAR-10 batch {p} not found")
        with open(p, "rb") as fh:
            batch = pickle.load(fh, encoding="bytes")
        xs.append(np.asarray(batch[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32))
        ys.append(np.asarray(batch[b"labels"]))
    return np.concatenate(xs), np.concatenate(ys)


def load_image_subset(name: str, per_class: int, split: str = "train", root=None) -> Dataset:
    """First ``per_class`` images of every class (file order), scaled to [0, 1]."""
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    if per_class < 1:
        raise ValueError("per_class must be positive")
    root = dataset_root(root)
    if name == "mnist":
        x, y = _load_mnist(root, split)
    elif name == "cifar10":
        x, y = _load_cifar10(root, split)
    else:
        raise ValueError(f"unknown dataset {name!r}")
    y = np.asarray(y, dtype=np.int64)
    num_classes = 10
    idx = []
    for c in range(num_classes):
        members = np.flatnonzero(y == c)
        if members.size < per_class:
            raise DataError(f"{name}/{split}: class {c} has {members.size} images, {per_class} requested")
        idx.append(members[:per_class])
    idx = np.concatenate(idx)
    x = np.asarray(x[idx], dtype=np.float32) / 255.0
    if x.ndim == 3:
        x = x[:, None]
    return Dataset(torch.from_numpy(x), torch.from_numpy(y[idx]), num_classes, f"{name}-{split}")


# ---------------------------------------------------------------------------
# batching


def stratified_batches(y: torch.Tensor, batch_size: int, num_classes: int, generator: torch.Generator) -> list:
    """Shuffled minibatch indices with classes interleaved round-robin.

    For a balanced dataset and ``batch_size >= num_classes`` every batch
    contains every class. A short trailing batch is folded into its
    predecessor.
    """
    if batch_size < num_classes:
        raise ValueError(f"batch_size {batch_size} is smaller than the class count {num_classes}")
    per_class = []
    for c in range(num_classes):
        members = torch.nonzero(y == c).flatten()
        per_class.append(members[torch.randperm(members.numel(), generator=generator)])
    longest = max(m.numel() for m in per_class)
    order = []
    for i in range(longest):
        for members in per_class:
            if i < members.numel():
                order.append(int(members[i]))
    order = torch.tensor(order, dtype=torch.long)
    batches = list(torch.split(order, batch_size))
    if len(batches) > 1 and batches[-1].numel() < num_classes:
        tail = batches.pop()
        batches[-1] = torch.cat([batches[-1], tail])
    return batches
