"""JSON experiment configuration: parsing, validation, defaults, data building."""

from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Annotated, Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from flis.data import (
    IID,
    ClientDataset,
    Dirichlet,
    LabelSkew,
    PartitionSpec,
    generate_synthetic,
    load_csv,
    partition,
    split_server,
)
from flis.errors import ConfigError
from flis.federation import FederationConfig
from flis.nn import LabeledData


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class LabelSkewSection(_Strict):
    scheme: Literal["label_skew"] = "label_skew"
    fraction: float = Field(0.25, gt=0, le=1)


class DirichletSection(_Strict):
    scheme: Literal["dirichlet"]
    alpha: float = Field(0.1, gt=0)


class IIDSection(_Strict):
    scheme: Literal["iid"]


PartitionSection = Annotated[Union[LabelSkewSection, DirichletSection, IIDSection], Field(discriminator="scheme")]


class DataSection(_Strict):
    num_classes: int = Field(8, ge=2)
    dim: int = Field(16, ge=2)
    per_class: int = Field(300, ge=1)
    spread: float = Field(0.8, ge=0)
    csv: str | None = None
    server_size: int = Field(200, ge=1)
    num_clients: int = Field(20, ge=1)
    test_fraction: float = Field(0.2, gt=0, lt=1)
    unseen_fraction: float = Field(0.0, ge=0, lt=1)
    partition: PartitionSection = LabelSkewSection()


class FederationSection(_Strict):
    mode: Literal["DC", "HC", "FedAvg", "SOLO"] = "DC"
    sample_rate: float = Field(1.0, gt=0, le=1)
    rounds: int = Field(30, ge=1)
    local_epochs: int = Field(1, ge=1)
    lr: float = Field(0.05, gt=0)
    batch_size: int = Field(32, ge=1)
    beta: float = Field(0.05, ge=0)
    inference_mode: Literal["soft", "one-hot"] = "soft"
    hc_distance_threshold: float = Field(0.01, gt=0)
    hidden: list[int] = [32]
    workers: int = Field(1, ge=1)

    @field_validator("hidden")
    @classmethod
    def _positive_widths(cls, v):
        if not v or any(h < 1 for h in v):
            raise ValueError("hidden layer widths must be positive")
        return v


class OutputSection(_Strict):
    dir: str = "runs/default"
    repeats: int = Field(1, ge=1)
    targets: list[float] = [0.7]
    personalize_epochs: int = Field(5, ge=0)


class SweepSection(_Strict):
    betas: list[float] = [0.0, 0.05, 0.1]
    epochs: list[int] = [1, 5]

    @model_validator(mode="after")
    def _non_empty(self):
        if not self.betas or not self.epochs:
            raise ValueError("sweep grids must be non-empty")
        return self


class ExperimentConfig(_Strict):
    seed: int = 0
    data: DataSection = DataSection()
    federation: FederationSection = FederationSection()
    output: OutputSection = OutputSection()
    sweep: SweepSection | None = None

    def federation_config(self, seed: int | None = None) -> FederationConfig:
        f = self.federation
        return FederationConfig(
            sample_rate=f.sample_rate, rounds=f.rounds, local_epochs=f.local_epochs, lr=f.lr,
            batch_size=f.batch_size, beta=f.beta, mode=f.mode, inference_mode=f.inference_mode,
            hc_distance_threshold=f.hc_distance_threshold, seed=self.seed if seed is None else seed,
            hidden=tuple(f.hidden), workers=f.workers,
        )

    def partition_spec(self, num_clients: int, seed: int) -> PartitionSpec:
        p = self.data.partition
        if isinstance(p, LabelSkewSection):
            scheme = LabelSkew(p.fraction)
        elif isinstance(p, DirichletSection):
            scheme = Dirichlet(p.alpha)
        else:
            scheme = IID()
        return PartitionSpec(scheme, num_clients, self.data.test_fraction, seed)

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def _locate(text: str, loc: tuple) -> int | None:
    """Best-effort line number of a nested key path inside JSON text."""
    pos, line = 0, None
    for key in loc:
        if not isinstance(key, str):
            continue
        m = re.compile(r'"%s"\s*:' % re.escape(key)).search(text, pos)
        if m is None:
            break
        pos = m.end()
        line = text.count("\n", 0, m.start()) + 1
    return line


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}:1: top level must be a JSON object")
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        lines = []
        for err in exc.errors():
            loc = tuple(k for k in err["loc"] if k not in ("label_skew", "dirichlet", "iid"))
            field = ".".join(str(k) for k in loc) or "<root>"
            where = _locate(text, loc)
            prefix = f"{source}:{where}" if where else source
            msg = "unknown key" if err["type"] == "extra_forbidden" else err["msg"]
            lines.append(f"{prefix}: {field}: {msg}")
        raise ConfigError("\n".join(lines)) from exc


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))


def build_data(cfg: ExperimentConfig, seed: int) -> tuple[list[ClientDataset], list[ClientDataset], LabeledData]:
    """(training clients, unseen clients, server set) for one seed."""
    d = cfg.data
    if d.csv:
        corpus = load_csv(d.csv, d.num_classes)
    else:
        corpus = generate_synthetic(d.num_classes, d.dim, d.per_class, d.spread, seed)
    server, rest = split_server(corpus, d.server_size, seed)
    if rest is None:
        raise ConfigError("server_size leaves no data for the clients")
    clients = partition(rest, cfg.partition_spec(d.num_clients, seed))
    n_unseen = int(round(d.unseen_fraction * d.num_clients))
    if n_unseen >= d.num_clients:
        raise ConfigError("unseen_fraction leaves no training clients")
    held = set(np.random.default_rng([seed, 0xA11]).choice(d.num_clients, size=n_unseen, replace=False).tolist())
    return [c for c in clients if c.client_id not in held], [c for c in clients if c.client_id in held], server
