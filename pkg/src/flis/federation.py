"""Round orchestration for dynamic clustering (DC), hierarchical clustering (HC), FedAvg and SOLO.

All randomness is derived from ``(seed, round, client_id)``, so client
updates inside a round are independent and can run on a thread pool without
changing results.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from flis.clustering import (
    AdjacencyMatrix,
    ClusterSet,
    InferenceMatrix,
    adjacency,
    hard_threshold,
    hierarchical_clusters,
    joint_clusters,
)
from flis.data import ClientDataset
from flis.errors import AggregationError, TrainingDivergenceError
from flis.nn import LabeledData, ModelParams, accuracy, client_update, inference_matrix, init_model, loss

MODES = ("DC", "HC", "FedAvg", "SOLO")
BYTES_PER_PARAM = 8

_TAG_TRAIN = 1
_TAG_SAMPLE = 2
_TAG_INIT = 3
_TAG_PERSONALIZE = 4


@dataclass(frozen=True)
class FederationConfig:
    sample_rate: float = 1.0
    rounds: int = 10
    local_epochs: int = 1
    lr: float = 0.05  # untuned default
    batch_size: int = 32  # untuned default
    beta: float = 0.5
    mode: str = "DC"
    inference_mode: str = "soft"
    hc_distance_threshold: float = 0.01
    seed: int = 0
    hidden: tuple[int, ...] = (32,)
    workers: int = 1

    def __post_init__(self):
        if not 0 < self.sample_rate <= 1:
            raise ValueError("sample_rate must lie in (0, 1]")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.inference_mode not in ("soft", "one-hot"):
            raise ValueError("inference_mode must be 'soft' or 'one-hot'")
        if self.rounds < 1 or self.local_epochs < 1 or self.batch_size < 1 or self.workers < 1:
            raise ValueError("rounds, local_epochs, batch_size and workers must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not self.hc_distance_threshold > 0:
            raise ValueError("hc_distance_threshold must be positive")


@dataclass(frozen=True, eq=False)
class ClusterModels:
    models: tuple[ModelParams, ...]
    clusters: ClusterSet | None  # None before the first clustering
    round: int = 0

    def __len__(self) -> int:
        return len(self.models)


@dataclass(eq=False)
class RoundRecord:
    round: int
    mode: str
    seed: int
    sampled: list[int]
    selected: dict[int, int]
    clusters: ClusterSet
    accuracy: dict[int, float]
    models_down: int
    models_up: int
    param_count: int
    adjacency: AdjacencyMatrix | None = None

    @property
    def bytes_down(self) -> int:
        return self.models_down * self.param_count * BYTES_PER_PARAM

    @property
    def bytes_up(self) -> int:
        return self.models_up * self.param_count * BYTES_PER_PARAM

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(list(self.accuracy.values())))

    @property
    def a_max(self) -> float | None:
        return None if self.adjacency is None else self.adjacency.off_diagonal_max

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "mode": self.mode,
            "seed": self.seed,
            "sampled": self.sampled,
            "selected": {str(k): v for k, v in self.selected.items()},
            "clusters": self.clusters.to_dict(),
            "accuracy": {str(k): v for k, v in self.accuracy.items()},
            "mean_accuracy": self.mean_accuracy,
            "models_down": self.models_down,
            "models_up": self.models_up,
            "param_count": self.param_count,
            "bytes_down": self.bytes_down,
            "bytes_up": self.bytes_up,
            "a_max": self.a_max,
            "adjacency": None if self.adjacency is None else self.adjacency.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> RoundRecord:
        return cls(
            round=d["round"],
            mode=d["mode"],
            seed=d["seed"],
            sampled=list(d["sampled"]),
            selected={int(k): v for k, v in d["selected"].items()},
            clusters=ClusterSet.from_dict(d["clusters"]),
            accuracy={int(k): v for k, v in d["accuracy"].items()},
            models_down=d["models_down"],
            models_up=d["models_up"],
            param_count=d["param_count"],
            adjacency=None if d.get("adjacency") is None else AdjacencyMatrix.from_dict(d["adjacency"]),
        )


@dataclass(eq=False)
class RunOutput:
    records: list[RoundRecord]
    models: ClusterModels
    initial: ModelParams
    assignment: dict[int, int] | None = None  # HC and SOLO: client -> model index
    history: list[ClusterModels] = field(default_factory=list)


def sample_size(num_clients: int, sample_rate: float) -> int:
    # guard against 0.3 * 10 == 3.0000000000000004
    return max(math.ceil(sample_rate * num_clients - 1e-9), 1)


def sample_clients(num_clients: int, sample_rate: float, round_idx: int, seed: int) -> list[int]:
    """Uniform sample without replacement of max(ceil(R*N), 1) positions, sorted."""
    n = sample_size(num_clients, sample_rate)
    rng = np.random.default_rng([seed, _TAG_SAMPLE, round_idx])
    return sorted(int(i) for i in rng.choice(num_clients, size=n, replace=False))


def client_seed(seed: int, round_idx: int, client_id: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, _TAG_TRAIN, round_idx, client_id])


def initial_model(config: FederationConfig, clients: Sequence[ClientDataset]) -> ModelParams:
    sample = clients[0].train
    return init_model(sample.dim, sample.num_classes, config.hidden, seed=[config.seed, _TAG_INIT])


def select_cluster(client: ClientDataset, models: ClusterModels | Sequence[ModelParams]) -> int:
    """Index of the cluster model with the lowest loss on the client's test split."""
    candidates = models.models if isinstance(models, ClusterModels) else tuple(models)
    if not candidates:
        raise ValueError("no cluster models to select from")
    if len(candidates) == 1:
        return 0
    losses = [loss(m, client.test) for m in candidates]
    return int(np.argmin(losses))  # first minimum wins ties


def aggregate(cluster: Sequence[int], updated: Mapping[int, tuple[ModelParams, int]]) -> ModelParams:
    """|D_k|-weighted mean of the members' parameter vectors.

    Written as ref + sum_k c_k (w_k - ref) so that identical members, and
    singletons, come back bit-for-bit unchanged.
    """
    members = sorted(cluster)
    missing = [k for k in members if k not in updated]
    if missing:
        raise AggregationError(f"cluster members {missing} sent no update")
    total = sum(updated[k][1] for k in members)
    if total <= 0:
        raise AggregationError("cluster holds no training samples")
    ref = updated[members[0]][0]
    acc = np.zeros_like(ref.weights)
    for k in members:
        model, size = updated[k]
        acc += (size / total) * (model.weights - ref.weights)
    return ref.with_weights(ref.weights + acc)


def _local_updates(
    config: FederationConfig,
    starts: Mapping[int, ModelParams],
    by_id: Mapping[int, ClientDataset],
    round_idx: int,
    epochs: int | None = None,
) -> dict[int, ModelParams]:
    epochs = config.local_epochs if epochs is None else epochs

    def work(k: int) -> ModelParams:
        train = by_id[k].train
        try:
            return client_update(
                starts[k], train, epochs, config.lr, min(config.batch_size, len(train)), client_seed(config.seed, round_idx, k)
            )
        except TrainingDivergenceError as exc:
            raise TrainingDivergenceError(exc.step, f"round {round_idx}, client {k}: {exc}") from exc

    ids = sorted(starts)
    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            return dict(zip(ids, pool.map(work, ids)))
    return {k: work(k) for k in ids}


def _similarity(config: FederationConfig, updates: Mapping[int, ModelParams], server: LabeledData) -> AdjacencyMatrix | None:
    if len(updates) < 2:
        return None
    mats = [InferenceMatrix(inference_matrix(updates[k], server, config.inference_mode), k) for k in sorted(updates)]
    return adjacency(mats)


def evaluate_clients(
    models: ClusterModels | Sequence[ModelParams],
    clients: Sequence[ClientDataset],
    assignment: Mapping[int, int] | None = None,
) -> dict[int, float]:
    """Top-1 test accuracy per client on its personalized model.

    Without an assignment each client picks its model by ``select_cluster``.
    """
    candidates = models.models if isinstance(models, ClusterModels) else tuple(models)
    out = {}
    for c in clients:
        j = assignment[c.client_id] if assignment is not None else select_cluster(c, candidates)
        out[c.client_id] = accuracy(candidates[j], c.test)
    return out


def _prepare(config: FederationConfig, clients: Sequence[ClientDataset], mode: str):
    if config.mode != mode:
        raise ValueError(f"config mode is {config.mode!r}, expected {mode!r}")
    if not clients:
        raise ValueError("no clients")
    ids = [c.client_id for c in clients]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate client ids")
    return {c.client_id: c for c in clients}, ids, initial_model(config, clients)


def run_flis_dc(
    config: FederationConfig,
    clients: Sequence[ClientDataset],
    server_data: LabeledData,
    keep_history: bool = False,
) -> RunOutput:
    """Dynamic clustering: overlapping clusters rebuilt from inference similarity each round."""
    by_id, ids, theta0 = _prepare(config, clients, "DC")
    models = ClusterModels((theta0,), None, 0)
    records, history = [], []
    for t in range(config.rounds):
        sampled = [ids[i] for i in sample_clients(len(ids), config.sample_rate, t, config.seed)]
        # round 0 has a single candidate, theta0, so selection is trivially 0
        selected = {k: select_cluster(by_id[k], models) for k in sampled}
        updates = _local_updates(config, {k: models.models[selected[k]] for k in sampled}, by_id, t)
        adj = _similarity(config, updates, server_data)
        if adj is None:
            clusters = ClusterSet((tuple(sampled),), "joint")
        else:
            clusters = joint_clusters(hard_threshold(adj, config.beta), adj.participant_ids)
        payload = {k: (updates[k], by_id[k].size) for k in sampled}
        new = ClusterModels(tuple(aggregate(c, payload) for c in clusters.clusters), clusters, t + 1)
        records.append(RoundRecord(
            round=t, mode="DC", seed=config.seed, sampled=sampled, selected=selected, clusters=clusters,
            accuracy=evaluate_clients(new, clients),
            models_down=len(sampled) * len(models), models_up=len(sampled),
            param_count=theta0.size, adjacency=adj,
        ))
        models = new
        if keep_history:
            history.append(models)
    return RunOutput(records, models, theta0, history=history)


def run_flis_hc(
    config: FederationConfig,
    clients: Sequence[ClientDataset],
    server_data: LabeledData,
    keep_history: bool = False,
) -> RunOutput:
    """Hierarchical clustering: one fixed partition built after an all-client round.

    In the first round every client trains from theta0; the server clusters
    them and starts every cluster from theta0. Those first-round updates are
    exactly what each client would compute from its cluster's theta0, so they
    are aggregated per cluster rather than recomputed.
    """
    by_id, ids, theta0 = _prepare(config, clients, "HC")
    records, history = [], []
    models: ClusterModels | None = None
    assignment: dict[int, int] = {}
    for t in range(config.rounds):
        adj = None
        if t == 0:
            sampled = list(ids)
            starts = {k: theta0 for k in sampled}
            updates = _local_updates(config, starts, by_id, t)
            adj = _similarity(config, updates, server_data)
            if adj is None:
                clusters = ClusterSet((tuple(ids),), "disjoint")
            else:
                clusters = hierarchical_clusters(adj, config.hc_distance_threshold)
            assignment = {k: j for j, c in enumerate(clusters.clusters) for k in c}
            models = ClusterModels(tuple(theta0 for _ in clusters.clusters), clusters, 0)
        else:
            sampled = [ids[i] for i in sample_clients(len(ids), config.sample_rate, t, config.seed)]
            starts = {k: models.models[assignment[k]] for k in sampled}
            updates = _local_updates(config, starts, by_id, t)
        payload = {k: (updates[k], by_id[k].size) for k in sampled}
        new_models = []
        for j, c in enumerate(models.clusters.clusters):
            present = [k for k in c if k in payload]
            new_models.append(aggregate(present, payload) if present else models.models[j])
        models = ClusterModels(tuple(new_models), models.clusters, t + 1)
        records.append(RoundRecord(
            round=t, mode="HC", seed=config.seed, sampled=sampled,
            selected={k: assignment[k] for k in sampled}, clusters=models.clusters,
            accuracy=evaluate_clients(models, clients, assignment),
            models_down=len(sampled), models_up=len(sampled),
            param_count=theta0.size, adjacency=adj,
        ))
        if keep_history:
            history.append(models)
    return RunOutput(records, models, theta0, assignment=assignment, history=history)


def run_fedavg(config: FederationConfig, clients: Sequence[ClientDataset], keep_history: bool = False) -> RunOutput:
    """One global model, |D_k|-weighted averaging of the sampled clients."""
    by_id, ids, theta0 = _prepare(config, clients, "FedAvg")
    models = ClusterModels((theta0,), None, 0)
    records, history = [], []
    for t in range(config.rounds):
        sampled = [ids[i] for i in sample_clients(len(ids), config.sample_rate, t, config.seed)]
        updates = _local_updates(config, {k: models.models[0] for k in sampled}, by_id, t)
        clusters = ClusterSet((tuple(sampled),), "disjoint")
        glob = aggregate(sampled, {k: (updates[k], by_id[k].size) for k in sampled})
        models = ClusterModels((glob,), clusters, t + 1)
        records.append(RoundRecord(
            round=t, mode="FedAvg", seed=config.seed, sampled=sampled, selected={k: 0 for k in sampled},
            clusters=clusters, accuracy=evaluate_clients(models, clients, {k: 0 for k in ids}),
            models_down=len(sampled), models_up=len(sampled), param_count=theta0.size,
        ))
        if keep_history:
            history.append(models)
    return RunOutput(records, models, theta0, assignment={k: 0 for k in ids}, history=history)


def run_solo(config: FederationConfig, clients: Sequence[ClientDataset], keep_history: bool = False) -> RunOutput:
    """Every client trains its own copy of theta0 on local data; no communication after the broadcast.

    Round t uses the same per-client seed as the federated modes, so a SOLO
    client follows the exact trajectory it would take in DC mode if it
    always picked its own model.
    """
    by_id, ids, theta0 = _prepare(config, clients, "SOLO")
    own = {k: theta0 for k in ids}
    assignment = {k: j for j, k in enumerate(ids)}
    clusters = ClusterSet(tuple((k,) for k in ids), "disjoint")
    records, history = [], []
    models = None
    for t in range(config.rounds):
        own = _local_updates(config, own, by_id, t)
        models = ClusterModels(tuple(own[k] for k in ids), clusters, t + 1)
        records.append(RoundRecord(
            round=t, mode="SOLO", seed=config.seed, sampled=list(ids), selected=dict(assignment),
            clusters=clusters, accuracy=evaluate_clients(models, clients, assignment),
            models_down=len(ids) if t == 0 else 0, models_up=0, param_count=theta0.size,
        ))
        if keep_history:
            history.append(models)
    return RunOutput(records, models, theta0, assignment=assignment, history=history)


def run(config: FederationConfig, clients: Sequence[ClientDataset], server_data: LabeledData, keep_history: bool = False) -> RunOutput:
    if config.mode == "DC":
        return run_flis_dc(config, clients, server_data, keep_history)
    if config.mode == "HC":
        return run_flis_hc(config, clients, server_data, keep_history)
    if config.mode == "FedAvg":
        return run_fedavg(config, clients, keep_history)
    return run_solo(config, clients, keep_history)


def personalize_unseen(
    unseen: Sequence[ClientDataset],
    models: ClusterModels | Sequence[ModelParams],
    epochs: int = 5,
    lr: float = 0.05,
    batch_size: int = 32,
    seed: int = 0,
) -> dict[int, float]:
    """New clients pick their best cluster model, fine-tune briefly, report test accuracy."""
    candidates = models.models if isinstance(models, ClusterModels) else tuple(models)
    out = {}
    for c in unseen:
        start = candidates[select_cluster(c, candidates)]
        if epochs > 0:
            rng = np.random.SeedSequence([seed, _TAG_PERSONALIZE, c.client_id])
            start = client_update(start, c.train, epochs, lr, min(batch_size, len(c.train)), rng)
        out[c.client_id] = accuracy(start, c.test)
    return out


def train_from_scratch(
    clients: Sequence[ClientDataset],
    theta0: ModelParams,
    epochs: int = 5,
    lr: float = 0.05,
    batch_size: int = 32,
    seed: int = 0,
) -> dict[int, float]:
    """Baseline for ``personalize_unseen``: the same fine-tuning budget from theta0."""
    out = {}
    for c in clients:
        rng = np.random.SeedSequence([seed, _TAG_PERSONALIZE, c.client_id])
        model = client_update(theta0, c.train, epochs, lr, min(batch_size, len(c.train)), rng)
        out[c.client_id] = accuracy(model, c.test)
    return out
