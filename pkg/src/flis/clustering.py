"""Inference-similarity clustering of client models.

The server compares client models through their outputs on its own
dataset. ``adjacency`` turns those outputs into a similarity matrix;
``hard_threshold`` + ``joint_clusters`` give the overlapping per-round
clusters of the dynamic mode, and ``hierarchical_clusters`` gives the fixed
partition of the hierarchical mode.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from flis.errors import DegenerateMatrixError, MetricUnavailableError, ShapeError


@dataclass(frozen=True, eq=False)
class InferenceMatrix:
    values: np.ndarray
    client_id: int


@dataclass(frozen=True, eq=False)
class AdjacencyMatrix:
    values: np.ndarray
    participant_ids: tuple[int, ...]

    @property
    def off_diagonal_max(self) -> float:
        n = self.values.shape[0]
        if n < 2:
            return float(self.values.max())
        return float(self.values[~np.eye(n, dtype=bool)].max())

    def to_dict(self) -> dict:
        return {"participants": list(self.participant_ids), "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> AdjacencyMatrix:
        return cls(np.array(d["values"], dtype=np.float64), tuple(d["participants"]))


@dataclass(frozen=True)
class ClusterSet:
    clusters: tuple[tuple[int, ...], ...]
    mode: str  # "joint" or "disjoint"

    def __post_init__(self):
        object.__setattr__(self, "clusters", tuple(tuple(sorted(int(k) for k in c)) for c in self.clusters))
        if any(not c for c in self.clusters):
            raise ValueError("clusters must be non-empty")
        if self.mode == "disjoint":
            seen = [k for c in self.clusters for k in c]
            if len(seen) != len(set(seen)):
                raise ValueError("disjoint clusters overlap")
        elif self.mode != "joint":
            raise ValueError(f"unknown cluster mode {self.mode!r}")

    def __len__(self) -> int:
        return len(self.clusters)

    @property
    def members(self) -> tuple[int, ...]:
        return tuple(sorted({k for c in self.clusters for k in c}))

    def to_dict(self) -> dict:
        return {"mode": self.mode, "clusters": [list(c) for c in self.clusters]}

    @classmethod
    def from_dict(cls, d: dict) -> ClusterSet:
        return cls(tuple(tuple(c) for c in d["clusters"]), d["mode"])


def adjacency(mats: Sequence[InferenceMatrix]) -> AdjacencyMatrix:
    """A[i, j] = ||B_i * B_j||_F / (||B_i||_F ||B_j||_F), Hadamard product inside.

    Each pair is evaluated in canonical (lower client id first) order, so the
    result does not depend on the order of ``mats`` beyond the permutation.
    """
    if len(mats) < 2:
        raise ShapeError("adjacency needs at least two inference matrices")
    shape = mats[0].values.shape
    if any(m.values.shape != shape for m in mats):
        raise ShapeError("inference matrices must share dimensions")
    sq = [np.square(np.asarray(m.values, dtype=np.float64)).ravel() for m in mats]
    norms = [math.sqrt(float(s.sum())) for s in sq]
    for m, nrm in zip(mats, norms):
        if nrm == 0.0:
            raise DegenerateMatrixError(f"inference matrix of client {m.client_id} is all zeros")
    n = len(mats)
    a = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            p, q = (i, j) if mats[i].client_id <= mats[j].client_id else (j, i)
            a[i, j] = a[j, i] = math.sqrt(float(np.dot(sq[p], sq[q]))) / (norms[p] * norms[q])
    return AdjacencyMatrix(a, tuple(m.client_id for m in mats))


def hard_threshold(adj: AdjacencyMatrix | np.ndarray, beta: float) -> np.ndarray:
    """Sign(A - beta) as an int matrix; exact ties map to 0."""
    values = adj.values if isinstance(adj, AdjacencyMatrix) else np.asarray(adj)
    return np.sign(values - beta).astype(np.int8)


def joint_clusters(signed: np.ndarray, participant_ids: Sequence[int] | None = None) -> ClusterSet:
    """One cluster per row: the positive entries of that row plus the row itself.

    Duplicate clusters are kept, so there are always as many clusters as
    participants.
    """
    signed = np.asarray(signed)
    if signed.ndim != 2 or signed.shape[0] != signed.shape[1]:
        raise ShapeError("thresholded matrix must be square")
    ids = list(range(signed.shape[0])) if participant_ids is None else list(participant_ids)
    clusters = []
    for i, row in enumerate(signed):
        idx = set(np.flatnonzero(row > 0).tolist()) | {i}
        clusters.append(tuple(ids[j] for j in idx))
    return ClusterSet(tuple(clusters), "joint")


def hierarchical_clusters(adj: AdjacencyMatrix, distance_threshold: float) -> ClusterSet:
    """Average-linkage agglomeration on d = A_max - A.

    A_max is the largest off-diagonal similarity. Merging continues while the
    closest pair of clusters is within ``distance_threshold``; equal
    distances merge the pair with the lowest cluster positions first.
    """
    a = np.asarray(adj.values, dtype=np.float64)
    n = a.shape[0]
    ids = adj.participant_ids
    if n == 1:
        return ClusterSet(((ids[0],),), "disjoint")
    dist = adj.off_diagonal_max - a
    clusters: list[list[int]] = [[i] for i in range(n)]
    while len(clusters) > 1:
        k = len(clusters)
        member = np.zeros((k, n))
        for p, c in enumerate(clusters):
            member[p, c] = 1.0
        sizes = member.sum(axis=1)
        link = (member @ dist @ member.T) / np.outer(sizes, sizes)
        link[np.tril_indices(k)] = math.inf
        flat = int(np.argmin(link))  # row-major: first hit is the lowest (p, q)
        p, q = divmod(flat, k)
        if link[p, q] > distance_threshold:
            break
        clusters[p] = clusters[p] + clusters.pop(q)
    return ClusterSet(tuple(tuple(ids[i] for i in c) for c in clusters), "disjoint")


def co_clustered_pairs(found: ClusterSet) -> set[tuple[int, int]]:
    pairs = set()
    for c in found.clusters:
        pairs.update(itertools.combinations(sorted(c), 2))
    return pairs


def clustering_error(found: ClusterSet, truth: Mapping[int, int] | Sequence[int]) -> tuple[int, int]:
    """(FP, FN) over unordered participant pairs w.r.t. planted distribution ids."""
    members = found.members
    labels = {k: int(truth[k]) for k in members}
    if any(v < 0 for v in labels.values()):
        raise MetricUnavailableError("ground-truth distribution ids are undefined for this partition")
    together = co_clustered_pairs(found)
    fp = fn = 0
    for i, j in itertools.combinations(members, 2):
        same = labels[i] == labels[j]
        if (i, j) in together and not same:
            fp += 1
        elif (i, j) not in together and same:
            fn += 1
    return fp, fn
