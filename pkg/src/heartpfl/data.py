"""Synthetic Gaussian-mixture data, Dirichlet label-skew partitions, proxy sets."""
from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    num_classes: int
    domain: str = "client"

    def __post_init__(self):
        if len(self.X) != len(self.y):
            raise ValueError("X and y lengths differ")
        if len(self.y) == 0:
            raise ValueError("dataset is empty")
        if self.y.min() < 0 or self.y.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx, domain: str | None = None) -> Dataset:
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx], self.num_classes, self.domain if domain is None else domain)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)


@dataclass(frozen=True)
class ClientPartition:
    indices: tuple[np.ndarray, ...]
    alpha: float
    seed: int

    @property
    def num_clients(self) -> int:
        return len(self.indices)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for idx in self.indices:
            h.update(np.asarray(idx, dtype=np.int64).tobytes())
            h.update(b"|")
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class ProxyDataset(Dataset):
    in_domain: bool = True
    source_indices: np.ndarray | None = field(default=None, compare=False)


# ---------------------------------------------------------------- generation


def mixture_means(num_classes: int, dim: int, class_sep: float, rng: np.random.Generator) -> np.ndarray:
    """Class means at pairwise distance ``class_sep`` when ``num_classes <= dim``.

    Means are a randomly rotated set of orthogonal axes scaled by
    ``class_sep / sqrt(2)``; with more classes than dimensions, random unit
    directions with the same scale are used instead.
    """
    if num_classes <= dim:
        q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
        dirs = q[:, :num_classes].T
    else:
        dirs = rng.normal(size=(num_classes, dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return dirs * (class_sep / np.sqrt(2.0))


def generate_gaussian_mixture(num_classes: int, dim: int, n: int, class_sep: float, seed: int,
                              scale: float = 1.0, domain: str = "client") -> Dataset:
    """``n`` samples with balanced labels from isotropic Gaussian clusters."""
    if num_classes < 2 or dim < 1 or n < num_classes:
        raise ValueError("need num_classes >= 2, dim >= 1 and n >= num_classes")
    rng = np.random.default_rng([seed, 0xDA7A])
    means = mixture_means(num_classes, dim, class_sep, rng)
    y = rng.permutation(np.arange(n) % num_classes)
    X = means[y] + scale * rng.normal(size=(n, dim))
    return Dataset(X, y.astype(np.int64), num_classes, domain)


def load_delimited(path: Path | str, delimiter: str = ",", num_classes: int | None = None,
                   domain: str = "external") -> Dataset:
    """Numeric text file, one sample per line: features followed by an integer label."""
    raw = np.loadtxt(path, delimiter=delimiter, ndmin=2)
    X, y = raw[:, :-1], raw[:, -1]
    if not np.all(y == np.round(y)):
        raise ValueError(f"{path}: last column must hold integer labels")
    y = y.astype(np.int64)
    return Dataset(X, y, int(y.max()) + 1 if num_classes is None else num_classes, domain)


def save_delimited(path: Path | str, data: Dataset, delimiter: str = ",") -> None:
    cols = np.column_stack([data.X, data.y])
    fmt = ["%.17g"] * data.X.shape[1] + ["%d"]
    np.savetxt(path, cols, delimiter=delimiter, fmt=fmt)


# ---------------------------------------------------------------- partitioning


def dirichlet_partition(data: Dataset, num_clients: int, alpha: float, seed: int,
                        min_per_client: int = 10, max_retries: int = 1000) -> ClientPartition:
    """Class-by-class Dirichlet(alpha) allocation of sample indices to clients."""
    if num_clients < 1 or alpha <= 0:
        raise ValueError("num_clients must be >= 1 and alpha > 0")
    if num_clients * min_per_client > len(data):
        raise ValueError(f"cannot give {num_clients} clients {min_per_client} samples from {len(data)}")
    rng = np.random.default_rng([seed, 0xD1])
    by_class = [np.flatnonzero(data.y == v) for v in range(data.num_classes)]
    for _ in range(max_retries):
        buckets: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
        for idx in by_class:
            if idx.size == 0:
                continue
            idx = rng.permutation(idx)
            props = rng.dirichlet(np.full(num_clients, alpha))
            cuts = (np.cumsum(props)[:-1] * idx.size).astype(np.int64)
            for k, part in enumerate(np.split(idx, cuts)):
                buckets[k].append(part)
        parts = tuple(np.sort(np.concatenate(b)) for b in buckets)
        if min(p.size for p in parts) >= min_per_client:
            return ClientPartition(parts, alpha, seed)
    raise RuntimeError(f"no partition with >= {min_per_client} samples per client after {max_retries} draws")


def label_entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def partition_histograms(data: Dataset, partition: ClientPartition) -> np.ndarray:
    return np.stack([np.bincount(data.y[idx], minlength=data.num_classes) for idx in partition.indices])


def mean_client_entropy(data: Dataset, partition: ClientPartition) -> float:
    return float(np.mean([label_entropy(h) for h in partition_histograms(data, partition)]))


def split_client_train_test(data: Dataset, partition: ClientPartition, test_fraction: float,
                            seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-client (train, test) index arrays, stratified by class where possible."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    out = []
    for k, idx in enumerate(partition.indices):
        rng = np.random.default_rng([seed, 0x57, k])
        if idx.size < 2:
            warnings.warn(f"client {k} has {idx.size} sample(s); all assigned to train", stacklevel=2)
            out.append((np.sort(idx), np.zeros(0, dtype=np.int64)))
            continue
        train, test = [], []
        for v in np.unique(data.y[idx]):
            members = rng.permutation(idx[data.y[idx] == v])
            n_test = int(np.floor(members.size * test_fraction + 0.5)) if members.size > 1 else 0
            test.append(members[:n_test])
            train.append(members[n_test:])
        out.append((np.sort(np.concatenate(train)), np.sort(np.concatenate(test))))
    return out


# ---------------------------------------------------------------- proxies


def make_proxy(source: Dataset, size: int, mode: str, seed: int, class_sep: float = 3.0,
               num_classes: int | None = None, exclude=()) -> ProxyDataset:
    """Server-side proxy data.

    ``in_domain`` draws ``size`` samples of ``source`` (skipping indices in
    ``exclude``); ``out_of_domain`` samples a fresh mixture with its own
    means, a wider covariance and its own label space.
    """
    if size < 1:
        raise ValueError("proxy size must be positive")
    if mode == "in_domain":
        pool = np.setdiff1d(np.arange(len(source)), np.asarray(exclude, dtype=np.int64))
        if size > pool.size:
            raise ValueError(f"proxy size {size} exceeds {pool.size} available samples")
        rng = np.random.default_rng([seed, 0x9A])
        idx = np.sort(rng.choice(pool, size=size, replace=False))
        return ProxyDataset(source.X[idx], source.y[idx], source.num_classes, f"{source.domain}/proxy",
                            in_domain=True, source_indices=idx)
    if mode == "out_of_domain":
        v = source.num_classes if num_classes is None else num_classes
        other = generate_gaussian_mixture(v, source.X.shape[1], size, class_sep, seed + 7919,
                                          scale=1.5, domain="ood")
        return ProxyDataset(other.X, other.y, v, "ood/proxy", in_domain=False)
    raise ValueError(f"unknown proxy mode {mode!r}; expected 'in_domain' or 'out_of_domain'")
