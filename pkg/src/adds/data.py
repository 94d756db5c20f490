"""Datasets, non-IID partitioning and label-skew statistics."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, InvalidInputError


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise InvalidInputError("features and labels do not align")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InvalidInputError("label outside [0, num_classes)")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes, self.name)

    def standardized(self) -> "Dataset":
        mu = self.features.mean(axis=0)
        sd = self.features.std(axis=0)
        sd[sd == 0] = 1.0
        return Dataset((self.features - mu) / sd, self.labels, self.num_classes, self.name)


@dataclass
class Partition:
    client_indices: list[np.ndarray]
    histograms: np.ndarray  # (clients, classes), rows sum to 1
    jsd: np.ndarray  # divergence of each client's labels from uniform


def make_blobs(num_classes, samples_per_class, d, spread, rng, center_scale=1.0) -> Dataset:
    """Isotropic Gaussian clusters, one per class, with standard-normal centres."""
    if min(num_classes, samples_per_class, d) < 1:
        raise InvalidInputError("counts must be >= 1")
    centers = rng.normal(0.0, center_scale, size=(num_classes, d))
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    features = centers[labels] + spread * rng.normal(size=(len(labels), d))
    order = rng.permutation(len(labels))
    return Dataset(features[order], labels[order], num_classes, "blobs")


def label_histogram(labels, num_classes) -> np.ndarray:
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes).astype(float)
    total = counts.sum()
    return counts / total if total else np.full(num_classes, 1.0 / num_classes)


def jsd(p, q) -> float:
    """Base-2 Jensen-Shannon divergence, in [0, 1]."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise InvalidInputError(f"length mismatch {p.shape} vs {q.shape}")
    total = p + q

    def kl(a):
        # a / m written as 2a / (p + q) so halving a subnormal cannot underflow to 0
        nz = a > 0
        return float(np.sum(a[nz] * np.log2(2 * a[nz] / total[nz])))

    return min(1.0, max(0.0, 0.5 * kl(p) + 0.5 * kl(q)))


def uniform_jsd(hist) -> float:
    hist = np.asarray(hist, dtype=np.float64)
    return jsd(hist, np.full(hist.size, 1.0 / hist.size))


def _finish(dataset: Dataset, idx_lists) -> Partition:
    idx_lists = [np.sort(np.asarray(i, dtype=np.int64)) for i in idx_lists]
    hists = np.array([label_histogram(dataset.labels[i], dataset.num_classes) for i in idx_lists])
    return Partition(idx_lists, hists, np.array([uniform_jsd(h) for h in hists]))


def dirichlet_partition(dataset: Dataset, num_clients, concentration, min_samples, rng, max_retries=1000) -> Partition:
    """Label-skewed split: each class is divided by a symmetric Dirichlet draw."""
    if concentration <= 0:
        raise ConfigError("must be > 0", "concentration")
    if num_clients < 1:
        raise ConfigError("must be >= 1", "clients")
    if num_clients * min_samples > len(dataset):
        raise ConfigError(
            f"{num_clients} clients x {min_samples} samples exceeds {len(dataset)} samples",
            "min_samples",
        )
    by_class = [np.flatnonzero(dataset.labels == c) for c in range(dataset.num_classes)]
    for _ in range(max_retries):
        buckets = [[] for _ in range(num_clients)]
        for idx in by_class:
            idx = rng.permutation(idx)
            props = rng.dirichlet(np.full(num_clients, concentration))
            cuts = (np.cumsum(props)[:-1] * len(idx)).astype(int)
            for k, part in enumerate(np.split(idx, cuts)):
                buckets[k].append(part)
        lists = [np.concatenate(b) for b in buckets]
        if min(len(x) for x in lists) >= min_samples:
            return _finish(dataset, lists)
    raise ConfigError(f"no partition with >= {min_samples} samples per client", "min_samples")


def shard_partition(dataset: Dataset, num_clients, shards_per_client, rng) -> Partition:
    """Sort by label, cut into equal shards, deal shards to clients at random."""
    n_shards = num_clients * shards_per_client
    if n_shards > len(dataset):
        raise ConfigError("more shards than samples", "shards_per_client")
    order = np.argsort(dataset.labels, kind="stable")
    usable = len(order) - len(order) % n_shards
    shards = np.split(order[:usable], n_shards)
    # leftovers (fewer than one per shard) go round-robin so the cover stays exact
    for i, extra in enumerate(order[usable:]):
        shards[i] = np.append(shards[i], extra)
    deal = rng.permutation(n_shards)
    lists = [
        np.concatenate([shards[s] for s in deal[k * shards_per_client : (k + 1) * shards_per_client]])
        for k in range(num_clients)
    ]
    return _finish(dataset, lists)


def save_csv_dataset(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{len(dataset)},{dataset.dim},{dataset.num_classes}\n")
        for row, label in zip(dataset.features, dataset.labels):
            fh.write(",".join(repr(float(v)) for v in row) + f",{int(label)}\n")


def load_csv_dataset(path) -> Dataset:
    """Read the ``n,d,num_classes`` header format; errors name the line."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        raise ConfigError(f"{path}: empty file")
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
        n, d, num_classes = (int(v) for v in header)
    except (StopIteration, ValueError) as exc:
        raise ConfigError(f"{path}:1: header must be 'n,d,num_classes'") from exc
    features = np.empty((n, d))
    labels = np.empty(n, dtype=np.int64)
    count = 0
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if count >= n:
            raise ConfigError(f"{path}:{lineno}: more rows than declared n={n}")
        if len(row) != d + 1:
            raise ConfigError(f"{path}:{lineno}: expected {d + 1} fields, got {len(row)}")
        try:
            values = [float(v) for v in row[:d]]
            label = int(row[d])
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from exc
        if not all(math.isfinite(v) for v in values):
            raise ConfigError(f"{path}:{lineno}: non-finite feature")
        if not 0 <= label < num_classes:
            raise ConfigError(f"{path}:{lineno}: label {label} outside [0, {num_classes})")
        features[count] = values
        labels[count] = label
        count += 1
    if count != n:
        raise ConfigError(f"{path}: declared {n} rows, found {count}")
    return Dataset(features, labels, num_classes, path.stem)
