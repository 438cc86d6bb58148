"""Evaluation quantities computed from round records."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from flis.clustering import clustering_error
from flis.data import ClientDataset
from flis.errors import MetricUnavailableError
from flis.federation import (
    BYTES_PER_PARAM,
    ClusterModels,
    FederationConfig,
    RoundRecord,
    evaluate_clients,
    run,
)
from flis.nn import LabeledData, ModelParams


@dataclass
class RunSummary:
    mode: str
    seed: int
    final_accuracy: float
    accuracy_series: list[float]
    clustering_error_series: list[int | None]
    comm_cost_mb: float
    rounds_to_target: dict[str, int | None] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "seed": self.seed,
            "final_accuracy": self.final_accuracy,
            "accuracy_series": self.accuracy_series,
            "clustering_error_series": self.clustering_error_series,
            "comm_cost_mb": self.comm_cost_mb,
            "rounds_to_target": self.rounds_to_target,
        }


def avg_local_accuracy(
    models: ClusterModels | Sequence[ModelParams],
    clients: Sequence[ClientDataset],
    assignment: Mapping[int, int] | None = None,
) -> float:
    """Unweighted mean of per-client top-1 test accuracy on the personalized model."""
    return float(np.mean(list(evaluate_clients(models, clients, assignment).values())))


def rounds_to_target(series: Sequence[float], target: float) -> int | None:
    """1-based index of the first round reaching ``target``, None if never."""
    for i, acc in enumerate(series):
        if acc >= target:
            return i + 1
    return None


def comm_cost(records: Iterable[RoundRecord], param_count: int | None = None) -> float:
    """Total traffic in Mb (10^6 bytes).

    With ``param_count`` the bytes are recomputed from the model counters,
    otherwise the recorded byte counters are summed.
    """
    total = 0
    for r in records:
        if param_count is None:
            total += r.bytes_down + r.bytes_up
        else:
            total += (r.models_down + r.models_up) * param_count * BYTES_PER_PARAM
    return total / 1e6


def clustering_error_series(records: Sequence[RoundRecord], truth: Mapping[int, int]) -> list[int | None]:
    out = []
    for r in records:
        try:
            out.append(sum(clustering_error(r.clusters, truth)))
        except MetricUnavailableError:
            out.append(None)
    return out


def summarize(records: Sequence[RoundRecord], truth: Mapping[int, int] | None = None, targets: Sequence[float] = ()) -> RunSummary:
    series = [r.mean_accuracy for r in records]
    errors = clustering_error_series(records, truth) if truth is not None else [None] * len(records)
    return RunSummary(
        mode=records[0].mode,
        seed=records[0].seed,
        final_accuracy=series[-1],
        accuracy_series=series,
        clustering_error_series=errors,
        comm_cost_mb=comm_cost(records),
        rounds_to_target={f"{t:g}": rounds_to_target(series, t) for t in targets},
    )


@dataclass
class SweepRow:
    beta: float
    epochs: int
    accuracy: float
    fp: int | None
    fn: int | None


def sweep(
    base: FederationConfig,
    betas: Sequence[float],
    epochs: Sequence[int],
    clients: Sequence[ClientDataset],
    server_data: LabeledData,
) -> list[SweepRow]:
    """One full run per (beta, local_epochs) grid point on shared data and seed.

    FP/FN are taken from the final round's cluster set; they are None when
    the partition has no planted ground truth.
    """
    truth = {c.client_id: c.distribution_id for c in clients}
    rows = []
    for ep in epochs:
        for b in betas:
            out = run(replace(base, beta=float(b), local_epochs=int(ep)), clients, server_data)
            try:
                fp, fn = clustering_error(out.records[-1].clusters, truth)
            except MetricUnavailableError:
                fp = fn = None
            rows.append(SweepRow(float(b), int(ep), out.records[-1].mean_accuracy, fp, fn))
    return rows


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["beta", "epochs", "accuracy", "fp", "fn"])
    for r in rows:
        w.writerow([repr(r.beta), r.epochs, repr(r.accuracy), "" if r.fp is None else r.fp, "" if r.fn is None else r.fn])
    return buf.getvalue()
