"""Datasets: the generated low-rank toy problem, MNIST from IDX files, and seeded batching.

Feature matrices are stored ``features x samples`` to match the network's
column-per-sample convention.
"""
from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_UBYTE = 0x08
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxFormatError(ValueError):
    pass


def make_rng(seed) -> np.random.Generator:
    """PCG64 generator; every random draw in the package goes through one of these."""
    return np.random.Generator(np.random.PCG64(seed))


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    test_mask: np.ndarray
    class_count: int

    @property
    def feature_count(self) -> int:
        return self.X.shape[0]

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name == "train":
            mask = ~self.test_mask
        elif name == "test":
            mask = self.test_mask
        else:
            raise ValueError(f"unknown split {name!r}")
        return self.X[:, mask], self.y[mask]

    def subset(self, train: int | None = None, test: int | None = None) -> Dataset:
        """Keep the first ``train``/``test`` samples of each split."""
        tr = np.flatnonzero(~self.test_mask)[:train]
        te = np.flatnonzero(self.test_mask)[:test]
        idx = np.concatenate([tr, te])
        mask = np.zeros(idx.size, dtype=bool)
        mask[tr.size:] = True
        return Dataset(self.X[:, idx], self.y[idx], mask, self.class_count)

    def with_validation(self, fraction: float = 0.1, seed=0) -> Dataset:
        """Replace the test split with a held-out ``fraction`` of the training split."""
        tr = np.flatnonzero(~self.test_mask)
        perm = make_rng(seed).permutation(tr.size)
        n_val = int(round(fraction * tr.size))
        mask = np.zeros(tr.size, dtype=bool)
        mask[perm[:n_val]] = True
        return Dataset(self.X[:, tr], self.y[tr], mask, self.class_count)


@dataclass(frozen=True)
class ToySpec:
    n_features: int
    total_features: int = 64
    samples: int = 5000
    noise: float = 0.10
    test_fraction: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.n_features <= self.total_features:
            raise ValueError(f"n_features must be in [1, {self.total_features}], got {self.n_features}")


def generate_toy(spec: ToySpec) -> Dataset:
    """Binary task on ``total_features`` inputs of which only ``n_features`` are independent.

    The remaining features are fixed random linear combinations of the
    independent ones. The label thresholds the noisy feature sum at its mean;
    the noise is Gaussian with standard deviation ``noise`` (features have unit
    variance, so 0.1 is 10% of a feature's scale).
    """
    rng = make_rng(spec.seed)
    base = rng.standard_normal((spec.n_features, spec.samples))
    mix = rng.standard_normal((spec.total_features - spec.n_features, spec.n_features))
    X = np.vstack([base, mix @ base])
    score = X.sum(axis=0) + spec.noise * rng.standard_normal(spec.samples)
    y = (score > score.mean()).astype(np.int64)
    perm = rng.permutation(spec.samples)
    n_test = int(round(spec.test_fraction * spec.samples))
    X, y = X[:, perm], y[perm]
    mask = np.zeros(spec.samples, dtype=bool)
    mask[spec.samples - n_test:] = True
    return Dataset(X, y, mask, 2)


def save_toy(ds: Dataset, spec: ToySpec, path) -> None:
    """Flat float64 dump of ``[X; y; test_mask]`` plus a JSON sidecar."""
    path = Path(path)
    np.vstack([ds.X, ds.y[None], ds.test_mask[None]]).astype("<f8").tofile(path)
    sidecar = {"shape": [ds.X.shape[0] + 2, ds.X.shape[1]], "spec": spec.__dict__}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2))


def load_toy(path) -> Dataset:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    raw = np.fromfile(path, dtype="<f8").reshape(meta["shape"])
    return Dataset(raw[:-2].copy(), raw[-2].astype(np.int64), raw[-1].astype(bool), 2)


def _open(path: Path):
    if path.exists():
        return open(path, "rb")
    gz = path.with_name(path.name + ".gz")
    if gz.exists():
        return gzip.open(gz, "rb")
    raise FileNotFoundError(f"missing IDX file {path} (or {gz.name})")


def read_idx(path) -> np.ndarray:
    """Parse an unsigned-byte IDX file (big-endian header)."""
    path = Path(path)
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header")
    zero, dtype, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype != IDX_UBYTE:
        raise IdxFormatError(f"{path}: bad magic 0x{int.from_bytes(raw[:4], 'big'):08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise IdxFormatError(f"{path}: payload has {len(raw) - header} bytes, expected {size}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def write_idx(path, array) -> None:
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">HBB", 0, IDX_UBYTE, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def load_mnist(directory) -> Dataset:
    """MNIST from the four standard IDX files (optionally gzipped) in ``directory``."""
    directory = Path(directory)
    Xs, ys = [], []
    for split in ("train", "test"):
        img_name, lab_name = MNIST_FILES[split]
        images = read_idx(directory / img_name)
        labels = read_idx(directory / lab_name)
        if images.ndim != 3 or labels.ndim != 1:
            raise IdxFormatError(f"{split}: expected 3-D images and 1-D labels")
        if images.shape[0] != labels.shape[0]:
            raise IdxFormatError(f"{split}: {images.shape[0]} images but {labels.shape[0]} labels")
        Xs.append(images.reshape(images.shape[0], -1).T.astype(np.float64) / 255.0)
        ys.append(labels.astype(np.int64))
    mask = np.concatenate([np.zeros(ys[0].size, dtype=bool), np.ones(ys[1].size, dtype=bool)])
    return Dataset(np.hstack(Xs), np.concatenate(ys), mask, 10)


def export_mnist_sample(directory, test_per_class: int = 100, seed: int = 0) -> Path:
    """Write mlxtend's bundled 5000-digit MNIST sample as IDX files.

    Stand-in for the full dataset when it cannot be downloaded: a seeded
    stratified split with ``test_per_class`` test digits per class.
    """
    from mlxtend.data import mnist_data

    X, y = mnist_data()
    rng = make_rng(seed)
    test = np.zeros(y.size, dtype=bool)
    for c in range(10):
        idx = np.flatnonzero(y == c)
        test[rng.choice(idx, size=test_per_class, replace=False)] = True
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for split, mask in (("train", ~test), ("test", test)):
        order = rng.permutation(np.flatnonzero(mask))
        img_name, lab_name = MNIST_FILES[split]
        write_idx(directory / img_name, X[order].reshape(-1, 28, 28))
        write_idx(directory / lab_name, y[order])
    return directory


def batches(X, y, batchsize: int, seed, epoch: int):
    """Shuffled minibatches for one epoch; the order depends only on ``(seed, epoch)``."""
    if batchsize < 1:
        raise ValueError("batchsize must be positive")
    n = X.shape[1]
    perm = make_rng([int(seed), int(epoch) + 1]).permutation(n)
    for start in range(0, n, batchsize):
        idx = perm[start:start + batchsize]
        yield X[:, idx], y[idx]
