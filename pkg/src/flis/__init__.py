"""Federated learning with clients grouped by the similarity of their model outputs."""

from flis.clustering import (
    AdjacencyMatrix,
    ClusterSet,
    InferenceMatrix,
    adjacency,
    clustering_error,
    hard_threshold,
    hierarchical_clusters,
    joint_clusters,
)
from flis.data import (
    IID,
    ClientDataset,
    Dirichlet,
    LabelSkew,
    PartitionSpec,
    generate_synthetic,
    partition,
    server_holdout,
    split_server,
)
from flis.federation import (
    ClusterModels,
    FederationConfig,
    RoundRecord,
    RunOutput,
    run,
    run_fedavg,
    run_flis_dc,
    run_flis_hc,
    run_solo,
)
from flis.metrics import avg_local_accuracy, comm_cost, rounds_to_target, summarize, sweep
from flis.nn import LabeledData, ModelParams, client_update, inference_matrix, init_model

__version__ = "0.1.0"

__all__ = [
    "AdjacencyMatrix", "ClusterSet", "InferenceMatrix", "adjacency", "clustering_error", "hard_threshold",
    "hierarchical_clusters", "joint_clusters", "IID", "ClientDataset", "Dirichlet", "LabelSkew",
    "PartitionSpec", "generate_synthetic", "partition", "server_holdout", "split_server", "ClusterModels",
    "FederationConfig", "RoundRecord", "RunOutput", "run", "run_fedavg", "run_flis_dc", "run_flis_hc",
    "run_solo", "avg_local_accuracy", "comm_cost", "rounds_to_target", "summarize", "sweep", "LabeledData",
    "ModelParams", "client_update", "inference_matrix", "init_model",
]
