"""Comparison algorithms sharing FedDTG's classifier and data pipeline.

* FedAvg / FedProx: clients train the classifier with cross entropy (FedProx
  adds the proximal gradient ``mu * (theta_k - theta_global)``), the server
  averages classifier parameters.
* Local only: clients train alone, nothing is transmitted.
* FedDTG ablations: :func:`feddtg_ablated_round` switches off the global
  generator and/or co-distillation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import nn
from .config import RunConfig
from .data import LabeledDataset, Shard, batch_iter
from .exceptions import FedDTGError, ParameterError, RoundError
from .nn import OptimizerState, ParamVector
from .protocol import (
    DOWNLINK,
    UPLINK,
    AblationFlags,
    CommLedger,
    Envelope,
    RoundRecord,
    average_params,
    run_round,
    select_clients,
)
from .rng import SERVER, derive_stream


@dataclass(frozen=True)
class BaselineConfig:
    algorithm: str = "fedavg"
    fedprox_mu: float = 0.01
    local_epochs: int = 1

    def __post_init__(self):
        if self.fedprox_mu < 0:
            raise ParameterError(f"fedprox_mu must be >= 0, got {self.fedprox_mu}")
        if self.local_epochs < 0:
            raise ParameterError("local_epochs must be >= 0")


@dataclass
class ClassifierClient:
    client_id: int
    classifier: ParamVector
    opt: OptimizerState

    def copy(self, client_id: int | None = None) -> "ClassifierClient":
        return ClassifierClient(
            self.client_id if client_id is None else client_id, self.classifier.copy(), self.opt.copy()
        )


def proximal_gradient(theta: ParamVector, theta_global: ParamVector, mu: float) -> np.ndarray:
    """Gradient of (mu / 2) * ||theta - theta_global||^2."""
    theta.check_layout(theta_global)
    return mu * (theta.values - theta_global.values)


def fedprox_local_step(
    theta: ParamVector,
    theta_global: ParamVector | None,
    x,
    y,
    mu: float,
    opt: OptimizerState,
) -> tuple[ParamVector, OptimizerState, float]:
    """One cross-entropy step with the proximal term; ``mu=0`` is a plain FedAvg step."""
    if mu < 0:
        raise ParameterError(f"mu must be >= 0, got {mu}")
    trace = nn.forward_trace(theta.spec, theta, x)
    loss, dlogits = nn.cross_entropy(trace.output, y)
    grads, _ = nn.backward_trace(trace, dlogits)
    if mu > 0 and theta_global is not None:
        grads = grads.with_values(grads.values + proximal_gradient(theta, theta_global, mu))
    new, opt = nn.optimizer_step(theta, grads, opt)
    return new, opt, loss


def local_classifier_training(
    client: ClassifierClient,
    dataset: LabeledDataset,
    shard: Shard,
    epochs: int,
    batch_size: int,
    rng: np.random.Generator,
    theta_global: ParamVector | None = None,
    mu: float = 0.0,
) -> tuple[ClassifierClient, float | None]:
    theta, opt = client.classifier, client.opt
    losses = []
    for _ in range(epochs):
        for idx in batch_iter(shard.indices, batch_size, rng):
            theta, opt, loss = fedprox_local_step(theta, theta_global, dataset.samples[idx], dataset.labels[idx], mu, opt)
            losses.append(loss)
    return ClassifierClient(client.client_id, theta, opt), (float(np.mean(losses)) if losses else None)


def fedavg_round(
    global_theta: ParamVector,
    clients: list[ClassifierClient],
    dataset: LabeledDataset,
    shards: Sequence[Shard],
    cfg: RunConfig,
    ledger: CommLedger,
    round_index: int,
    mu: float = 0.0,
) -> tuple[ParamVector, list[ClassifierClient], RoundRecord]:
    """Broadcast, local CE (+ proximal) training, parameter mean of the classifiers.

    Each client keeps its locally trained classifier as its personal model;
    the returned global model is what the next round broadcasts.
    """
    t = round_index
    seed = cfg.seed
    clients = list(clients)
    record = RoundRecord(t, [])
    stage = "select"
    try:
        selected = select_clients(len(clients), cfg.frac, derive_stream(seed, t, SERVER, "select"))
        record.selected = selected
        stage = "broadcast"
        for k in selected:
            clients[k] = replace(clients[k], classifier=global_theta.copy())
            ledger.record(t, DOWNLINK, Envelope("classifier", k, global_theta.values))
        stage = "local_training"
        losses = []
        for k in selected:
            if len(shards[k]) == 0:
                record.skipped_clients.append(k)
                continue
            rng = derive_stream(seed, t, k, "local")
            clients[k], loss = local_classifier_training(
                clients[k], dataset, shards[k], cfg.local_epochs, cfg.batch_size, rng, global_theta, mu
            )
            if loss is not None:
                losses.append(loss)
        if losses:
            record.losses = {"classifier": float(np.mean(losses))}
        stage = "aggregate"
        for k in selected:
            ledger.record(t, UPLINK, Envelope("classifier", k, clients[k].classifier.values))
        weights = None
        if cfg.aggregation_weighting == "data_size":
            weights = [len(shards[k]) for k in selected]
            if sum(weights) == 0:
                weights = None
        global_theta = average_params([clients[k].classifier for k in selected], weights)
    except FedDTGError as exc:
        raise RoundError(t, stage, exc) from exc
    record.ledger = ledger.totals(t)
    return global_theta, clients, record


def local_only_round(
    clients: list[ClassifierClient],
    dataset: LabeledDataset,
    shards: Sequence[Shard],
    cfg: RunConfig,
    round_index: int,
) -> tuple[list[ClassifierClient], RoundRecord]:
    """The selected clients each train on their own shard; nothing is transmitted."""
    t = round_index
    clients = list(clients)
    selected = select_clients(len(clients), cfg.frac, derive_stream(cfg.seed, t, SERVER, "select"))
    record = RoundRecord(t, selected)
    losses = []
    for k in selected:
        if len(shards[k]) == 0:
            record.skipped_clients.append(k)
            continue
        rng = derive_stream(cfg.seed, t, k, "local")
        clients[k], loss = local_classifier_training(clients[k], dataset, shards[k], cfg.local_epochs, cfg.batch_size, rng)
        if loss is not None:
            losses.append(loss)
    if losses:
        record.losses = {"classifier": float(np.mean(losses))}
    return clients, record


def local_only_train(
    clients: list[ClassifierClient],
    dataset: LabeledDataset,
    shards: Sequence[Shard],
    cfg: RunConfig,
) -> tuple[list[ClassifierClient], list[RoundRecord]]:
    """``cfg.rounds`` rounds of local training without communication.

    Clients with an empty shard are skipped and listed in each record's
    ``skipped_clients``.
    """
    records = []
    for t in range(1, cfg.rounds + 1):
        clients, rec = local_only_round(clients, dataset, shards, cfg, t)
        records.append(rec)
    return clients, records


def feddtg_ablated_round(server, clients, dataset, shards, cfg, ledger, flags: AblationFlags):
    """FedDTG round with parts switched off.

    * ``use_co_distillation=False``: no noise seed, soft labels or
      distillation; the generator is still trained and averaged.
    * ``use_global_generator=False``: no generator/discriminator upload or
      averaging; each client keeps its own GAN and distills on its own fake
      samples drawn from the server's noise seed and balanced labels.
    """
    return run_round(server, clients, dataset, shards, cfg, ledger, flags)
