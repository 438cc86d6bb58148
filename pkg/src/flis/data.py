"""Synthetic corpus, server holdout, and Non-IID client partitions."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from flis.errors import PartitionError
from flis.nn import LabeledData


@dataclass(frozen=True)
class LabelSkew:
    fraction: float

    def __post_init__(self):
        if not 0 < self.fraction <= 1:
            raise ValueError("label-skew fraction must lie in (0, 1]")


@dataclass(frozen=True)
class Dirichlet:
    alpha: float

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("Dirichlet alpha must be positive")


@dataclass(frozen=True)
class IID:
    pass


@dataclass(frozen=True)
class PartitionSpec:
    scheme: LabelSkew | Dirichlet | IID
    num_clients: int
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError("need at least one client")
        if not 0 < self.test_fraction < 1:
            raise ValueError("test_fraction must lie in (0, 1)")


@dataclass(frozen=True, eq=False)
class ClientDataset:
    client_id: int
    train: LabeledData
    test: LabeledData
    distribution_id: int = -1

    @property
    def size(self) -> int:
        return len(self.train)


def generate_synthetic(num_classes: int, dim: int, per_class: int, spread: float, seed: int) -> LabeledData:
    """Isotropic Gaussian blobs around seed-derived unit-norm centers."""
    if num_classes < 2 or dim < 2:
        raise ValueError("need at least 2 classes and 2 dimensions")
    if per_class < 1:
        raise ValueError("per_class must be positive")
    if spread < 0:
        raise ValueError("spread must be non-negative")
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(num_classes, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    labels = np.repeat(np.arange(num_classes), per_class)
    x = centers[labels] + spread * rng.normal(size=(labels.size, dim))
    return LabeledData(x, labels, num_classes)


def load_csv(path: str | Path, num_classes: int | None = None) -> LabeledData:
    """Read a corpus with header ``f0,...,f{d-1},label``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        d = len(header) - 1
        expected = [f"f{i}" for i in range(d)] + ["label"]
        if header != expected:
            raise ValueError(f"{path}: header must be f0..f{d - 1},label")
        rows = [r for r in reader if r]
    x = np.array([[float(v) for v in r[:-1]] for r in rows])
    y = np.array([int(r[-1]) for r in rows])
    return LabeledData(x, y, num_classes if num_classes is not None else int(y.max()) + 1)


def _stratified_pick(labels: np.ndarray, m: int, num_classes: int, rng) -> np.ndarray:
    by_class = [rng.permutation(np.flatnonzero(labels == c)) for c in range(num_classes)]
    quota = np.full(num_classes, m // num_classes)
    quota[rng.permutation(num_classes)[: m % num_classes]] += 1
    # classes too small for their quota hand the rest to the emptiest open class
    avail = np.array([len(ix) for ix in by_class])
    quota = np.minimum(quota, avail)
    while quota.sum() < m:
        open_ = np.flatnonzero(quota < avail)
        quota[open_[np.argmin(quota[open_])]] += 1
    return np.sort(np.concatenate([ix[:q] for ix, q in zip(by_class, quota)]))


def split_server(corpus: LabeledData, m: int, seed: int) -> tuple[LabeledData, LabeledData | None]:
    """Carve a class-stratified server set of size ``m``; return (server, rest)."""
    if m > len(corpus):
        raise ValueError(f"server holdout of {m} exceeds corpus of {len(corpus)}")
    if m < 1:
        raise ValueError("server holdout must be non-empty")
    rng = np.random.default_rng([seed, 0x5E4])
    picked = _stratified_pick(corpus.labels, m, corpus.num_classes, rng)
    rest = np.setdiff1d(np.arange(len(corpus)), picked)
    return corpus.subset(picked), (corpus.subset(rest) if rest.size else None)


def server_holdout(corpus: LabeledData, m: int = 200, seed: int = 0) -> LabeledData:
    """Class-stratified server dataset; 200 samples is plenty for the synthetic task."""
    return split_server(corpus, m, seed)[0]


def _train_test(
    corpus: LabeledData, client_id: int, rows: np.ndarray, test_fraction: float, dist_id: int, rng
) -> ClientDataset:
    """Per-class split so the test set follows the client's own label mix."""
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size < 2:
        raise PartitionError(f"client {client_id} received {rows.size} samples; need at least 2")
    labels = corpus.labels[rows]
    train, test = [], []
    for c in np.unique(labels):
        cls = rng.permutation(rows[labels == c])
        n_test = int(round(test_fraction * cls.size))
        test.append(cls[:n_test])
        train.append(cls[n_test:])
    train, test = np.concatenate(train), np.concatenate(test)
    # tiny clients may end up with an empty side
    if test.size == 0:
        test, train = train[:1], train[1:]
    elif train.size == 0:
        train, test = test[:1], test[1:]
    return ClientDataset(client_id, corpus.subset(np.sort(train)), corpus.subset(np.sort(test)), dist_id)


def label_groups(num_classes: int, fraction: float, seed: int) -> list[tuple[int, ...]]:
    """Seed-shuffled label subsets of size ceil(fraction * num_classes).

    The shuffled label order is cut into consecutive windows; the last one
    wraps around when the class count is not a multiple of the subset size.
    """
    k = max(1, math.ceil(fraction * num_classes - 1e-9))
    order = np.random.default_rng([seed, 0x1AB]).permutation(num_classes)
    n_groups = math.ceil(num_classes / k)
    return [tuple(sorted(int(order[(g * k + i) % num_classes]) for i in range(k))) for g in range(n_groups)]


def partition_label_skew(corpus: LabeledData, spec: PartitionSpec) -> list[ClientDataset]:
    """Each client owns one label subset; clients cycle through the subsets."""
    if not isinstance(spec.scheme, LabelSkew):
        raise ValueError("partition_label_skew needs a LabelSkew scheme")
    groups = label_groups(corpus.num_classes, spec.scheme.fraction, spec.seed)
    owner_group = [cid % len(groups) for cid in range(spec.num_clients)]
    rng = np.random.default_rng([spec.seed, 0x5EED])
    rows: list[list[np.ndarray]] = [[] for _ in range(spec.num_clients)]
    for c in range(corpus.num_classes):
        owners = [cid for cid in range(spec.num_clients) if c in groups[owner_group[cid]]]
        cls = np.flatnonzero(corpus.labels == c)
        if cls.size == 0:
            continue
        if not owners:
            raise PartitionError(f"class {c} is owned by no client ({spec.num_clients} clients, {len(groups)} label subsets)")
        for cid, chunk in zip(owners, np.array_split(rng.permutation(cls), len(owners))):
            rows[cid].append(chunk)
    return [
        _train_test(corpus, cid, np.concatenate(r) if r else np.empty(0, np.int64), spec.test_fraction, owner_group[cid], rng)
        for cid, r in enumerate(rows)
    ]


def _largest_remainder(p: np.ndarray, total: int) -> np.ndarray:
    raw = p * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    # stable sort keeps ties at the lowest client index
    counts[np.argsort(-(raw - counts), kind="stable")[:short]] += 1
    return counts


def partition_dirichlet(corpus: LabeledData, spec: PartitionSpec, max_retries: int = 100, min_size: int = 2) -> list[ClientDataset]:
    """Per-class proportions ~ Dir(alpha); redraw until every client has ``min_size`` samples."""
    if not isinstance(spec.scheme, Dirichlet):
        raise ValueError("partition_dirichlet needs a Dirichlet scheme")
    n = spec.num_clients
    rng = np.random.default_rng([spec.seed, 0xD1C])
    class_rows = [np.flatnonzero(corpus.labels == c) for c in range(corpus.num_classes)]
    for _ in range(max_retries):
        rows: list[list[np.ndarray]] = [[] for _ in range(n)]
        for cls in class_rows:
            if cls.size == 0:
                continue
            props = rng.dirichlet(np.full(n, spec.scheme.alpha))
            counts = _largest_remainder(props, cls.size)
            cuts = np.cumsum(counts)[:-1]
            for cid, chunk in enumerate(np.split(rng.permutation(cls), cuts)):
                rows[cid].append(chunk)
        sizes = [sum(len(c) for c in r) for r in rows]
        if min(sizes) >= min_size:
            return [_train_test(corpus, cid, np.concatenate(r), spec.test_fraction, -1, rng) for cid, r in enumerate(rows)]
    raise PartitionError(f"Dirichlet partition left a client below {min_size} samples after {max_retries} draws")


def partition_iid(corpus: LabeledData, spec: PartitionSpec) -> list[ClientDataset]:
    rng = np.random.default_rng([spec.seed, 0x11D])
    chunks = np.array_split(rng.permutation(len(corpus)), spec.num_clients)
    return [_train_test(corpus, cid, ch, spec.test_fraction, 0, rng) for cid, ch in enumerate(chunks)]


def partition(corpus: LabeledData, spec: PartitionSpec) -> list[ClientDataset]:
    if isinstance(spec.scheme, LabelSkew):
        return partition_label_skew(corpus, spec)
    if isinstance(spec.scheme, Dirichlet):
        return partition_dirichlet(corpus, spec)
    return partition_iid(corpus, spec)
