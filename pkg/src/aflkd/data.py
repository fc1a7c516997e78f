"""Synthetic classification tasks and non-IID client partitioning."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError, UnknownClientError
from .nn import Array, as_tensor

_MAGIC = b"AFLD"
_FORMAT_VERSION = 1


@dataclass
class Dataset:
    inputs: Array   # [n, d] float64
    labels: Array   # [n] int64 in [0, num_classes)
    num_classes: int

    def __post_init__(self):
        self.inputs = as_tensor(self.inputs)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def validate(self):
        if self.inputs.ndim != 2 or self.labels.ndim != 1:
            raise ShapeError("inputs must be [n, d] and labels [n]")
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ShapeError("inputs and labels disagree on sample count")
        if self.n < self.num_classes:
            raise ShapeError("fewer samples than classes")
        present = np.unique(self.labels)
        if present.min() < 0 or present.max() >= self.num_classes:
            raise ShapeError("labels out of range")
        if len(present) != self.num_classes:
            raise ShapeError("some classes have no samples")


def _class_centers(classes: int, dim: int, radius: float) -> Array:
    # deterministic ring in the first two coordinates, zero elsewhere
    angles = 2.0 * np.pi * np.arange(classes) / classes
    centers = np.zeros((classes, dim))
    centers[:, 0] = radius * np.cos(angles)
    centers[:, 1] = radius * np.sin(angles)
    return centers


def make_blobs(seed, classes: int, dim: int, samples: int, spread: float,
               radius: float = 4.0) -> Dataset:
    """Gaussian clusters with one deterministic center per class.

    Labels are balanced up to rounding and the sample order is shuffled;
    identical seeds give identical bits.
    """
    if classes < 2 or dim < 2 or samples < classes:
        raise ConfigError("need classes >= 2, dim >= 2 and samples >= classes")
    if spread <= 0.0:
        raise ConfigError("spread must be positive")
    rng = np.random.default_rng(seed)
    counts = np.full(classes, samples // classes)
    counts[: samples % classes] += 1
    labels = np.repeat(np.arange(classes), counts)
    centers = _class_centers(classes, dim, radius)
    inputs = centers[labels] + spread * rng.standard_normal((samples, dim))
    order = rng.permutation(samples)
    ds = Dataset(inputs[order], labels[order], classes)
    ds.validate()
    return ds


def train_test_split(ds: Dataset, test_fraction: float, seed) -> tuple[Dataset, Dataset]:
    """Stratified split so both sides keep every class."""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError("test_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    test_idx = []
    for c in range(ds.num_classes):
        pool = np.flatnonzero(ds.labels == c)
        k = max(1, int(round(test_fraction * len(pool))))
        if k >= len(pool):
            raise ConfigError(f"class {c} too small to split")
        test_idx.append(rng.choice(pool, size=k, replace=False))
    test_idx = np.sort(np.concatenate(test_idx))
    mask = np.zeros(ds.n, dtype=bool)
    mask[test_idx] = True
    train = Dataset(ds.inputs[~mask], ds.labels[~mask], ds.num_classes)
    test = Dataset(ds.inputs[mask], ds.labels[mask], ds.num_classes)
    train.validate()
    test.validate()
    return train, test


@dataclass
class ClientPartition:
    indices: list[Array]          # per-client index arrays into a Dataset
    with_replacement: bool = False

    @property
    def num_clients(self) -> int:
        return len(self.indices)


@dataclass
class LabelDistribution:
    counts: Array   # [num_clients, num_classes] int64

    @property
    def proportions(self) -> Array:
        totals = self.counts.sum(axis=1, keepdims=True)
        return self.counts / np.maximum(totals, 1)


def _label_counts(ds: Dataset, indices: list[Array]) -> LabelDistribution:
    counts = np.zeros((len(indices), ds.num_classes), dtype=np.int64)
    for j, idx in enumerate(indices):
        counts[j] = np.bincount(ds.labels[idx], minlength=ds.num_classes)
    return LabelDistribution(counts)


def dirichlet_partition(ds: Dataset, num_clients: int, alpha: float | None, seed,
                        samples_per_client: int | None = None
                        ) -> tuple[ClientPartition, LabelDistribution]:
    """Partition a dataset across clients by Dirichlet-drawn class proportions.

    alpha=None means IID (exactly uniform proportions). By default samples
    are assigned disjointly; with samples_per_client set, each client draws
    that many samples with replacement from class-conditional pools instead.
    """
    if num_clients < 1:
        raise ConfigError("need at least one client")
    if alpha is not None and alpha <= 0.0:
        raise ConfigError("alpha must be positive")
    rng = np.random.default_rng(seed)
    C = ds.num_classes
    if alpha is None:
        props = np.full((num_clients, C), 1.0 / C)
    else:
        props = rng.dirichlet(np.full(C, alpha), size=num_clients)

    class_pools = [np.flatnonzero(ds.labels == c) for c in range(C)]

    if samples_per_client is not None:
        if samples_per_client < 1:
            raise ConfigError("samples_per_client must be positive")
        indices = []
        for j in range(num_clients):
            counts = rng.multinomial(samples_per_client, props[j])
            parts = [rng.choice(class_pools[c], size=counts[c], replace=True)
                     for c in range(C) if counts[c] > 0]
            indices.append(np.sort(np.concatenate(parts)))
        part = ClientPartition(indices, with_replacement=True)
        return part, _label_counts(ds, part.indices)

    owner = np.empty(ds.n, dtype=np.int64)
    for c in range(C):
        pool = class_pools[c]
        weights = props[:, c]
        total = weights.sum()
        weights = np.full(num_clients, 1.0 / num_clients) if total <= 0 else weights / total
        owner[pool] = rng.choice(num_clients, size=len(pool), p=weights)
    indices = [np.flatnonzero(owner == j) for j in range(num_clients)]

    # every client must be able to train: move one sample from the largest
    for j in range(num_clients):
        while len(indices[j]) == 0:
            donor = int(np.argmax([len(ix) for ix in indices]))
            indices[j] = indices[donor][-1:]
            indices[donor] = indices[donor][:-1]
    part = ClientPartition(indices)
    return part, _label_counts(ds, part.indices)


def sample_batch(ds: Dataset, partition: ClientPartition, client: int,
                 batch_size: int, rng: np.random.Generator) -> tuple[Array, Array]:
    """Uniform-with-replacement minibatch from one client's samples."""
    if not 0 <= client < partition.num_clients:
        raise UnknownClientError(client)
    pool = partition.indices[client]
    if len(pool) == 0:
        raise UnknownClientError(f"client {client} owns no samples")
    picks = pool[rng.integers(0, len(pool), size=batch_size)]
    return ds.inputs[picks], ds.labels[picks]


# ---------------------------------------------------------------------------
# Flat binary export (reproducibility audits)

_HEADER = struct.Struct("<4sIIIQ")


def write_arrays(path, inputs: Array, labels: Array, num_classes: int):
    inputs = as_tensor(inputs)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    n, d = inputs.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _FORMAT_VERSION, num_classes, d, n))
        fh.write(inputs.tobytes(order="C"))
        fh.write(labels.tobytes(order="C"))


def save_dataset(path, ds: Dataset):
    write_arrays(path, ds.inputs, ds.labels, ds.num_classes)


def load_dataset(path, validate: bool = True) -> Dataset:
    with open(path, "rb") as fh:
        magic, version, classes, d, n = _HEADER.unpack(fh.read(_HEADER.size))
        if magic != _MAGIC:
            raise ConfigError(f"not a dataset file: bad magic {magic!r}")
        if version != _FORMAT_VERSION:
            raise ConfigError(f"unsupported dataset format version {version}")
        inputs = np.frombuffer(fh.read(n * d * 8), dtype=np.float64).reshape(n, d)
        labels = np.frombuffer(fh.read(n * 8), dtype=np.int64)
    ds = Dataset(inputs.copy(), labels.copy(), classes)
    if validate:
        ds.validate()
    return ds
