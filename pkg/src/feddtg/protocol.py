"""The FedDTG round: local three-player GAN training, generator/discriminator
averaging on the server, and co-distillation on synchronized fake samples.

Messages between server and clients are simulated in-process as typed
envelopes. Each envelope is priced in floats by the :class:`CommLedger`, so
communication volume can be audited exactly. No envelope type carries a
classifier or raw samples from a FedDTG client.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import gan
from .config import RunConfig
from .data import LabeledDataset, Shard, batch_iter
from .exceptions import FedDTGError, LayoutError, ParameterError, ProtocolError, RoundError
from .gan import DistillConfig, FakeBatch, TripletState
from .nn import ParamVector
from .rng import SERVER, derive_seed, derive_stream

UPLINK = "uplink"
DOWNLINK = "downlink"
PAYLOAD_KINDS = ("generator", "discriminator", "soft_labels", "classifier", "noise_seed")
LEDGER_FIELDS = tuple(f"{d}_{k}" for d in (UPLINK, DOWNLINK) for k in PAYLOAD_KINDS) + ("uplink_total", "downlink_total")


# ---------------------------------------------------------------- envelopes


@dataclass(frozen=True)
class Envelope:
    kind: str
    client_id: int
    payload: np.ndarray

    def __post_init__(self):
        if self.kind not in PAYLOAD_KINDS:
            raise ProtocolError(f"unknown payload kind {self.kind!r}")

    @property
    def n_floats(self) -> int:
        return int(np.asarray(self.payload).size)


@dataclass(frozen=True)
class ClientUpdate:
    """What a FedDTG client uploads after local training."""

    client_id: int
    generator: ParamVector
    discriminator: ParamVector

    def envelopes(self) -> list[Envelope]:
        return [
            Envelope("generator", self.client_id, self.generator.values),
            Envelope("discriminator", self.client_id, self.discriminator.values),
        ]


@dataclass
class CommLedger:
    """Float counts of every transfer, by round, client, direction and payload kind."""

    entries: list[tuple[int, int, str, str, int]] = field(default_factory=list)

    def record(self, round_index: int, direction: str, envelope: Envelope) -> None:
        if direction not in (UPLINK, DOWNLINK):
            raise ProtocolError(f"unknown direction {direction!r}")
        self.entries.append((round_index, envelope.client_id, direction, envelope.kind, envelope.n_floats))

    def total(self, direction=None, kind=None, round_index=None, client_id=None) -> int:
        return sum(
            n
            for r, c, d, k, n in self.entries
            if (direction is None or d == direction)
            and (kind is None or k == kind)
            and (round_index is None or r == round_index)
            and (client_id is None or c == client_id)
        )

    def totals(self, round_index: int | None = None) -> dict[str, int]:
        """Cumulative (or single-round) totals keyed by :data:`LEDGER_FIELDS`."""
        out = {f"{d}_{k}": self.total(d, k, round_index) for d in (UPLINK, DOWNLINK) for k in PAYLOAD_KINDS}
        for d in (UPLINK, DOWNLINK):
            out[f"{d}_total"] = self.total(d, None, round_index)
        return out

    def to_list(self) -> list[list]:
        return [list(e) for e in self.entries]

    @classmethod
    def from_list(cls, rows) -> "CommLedger":
        return cls([(int(r), int(c), str(d), str(k), int(n)) for r, c, d, k, n in rows])


# ----------------------------------------------------------------- server


@dataclass
class ServerState:
    generator: ParamVector
    discriminator: ParamVector
    round: int = 0
    seed: int = 0


@dataclass(frozen=True)
class RoundPlan:
    round: int
    selected: tuple[int, ...]
    noise_seed: int
    distill_sample_count: int
    batch_size: int


GENERATOR_ABLATIONS = ("local_gan", "distill_only")


@dataclass(frozen=True)
class AblationFlags:
    """Which parts of FedDTG are active.

    ``generator_ablation`` chooses what ``use_global_generator=False`` means:

    * ``"local_gan"``: no G/D exchange; each client keeps its own GAN and
      distills on its own fake samples.
    * ``"distill_only"``: G/D are still shared so that clients exchange soft
      labels on identical samples, but generated samples carry no label
      supervision for the classifier (real-only classifier updates and a
      pure KL distillation objective).
    """

    use_global_generator: bool = True
    use_co_distillation: bool = True
    generator_ablation: str = "local_gan"

    def __post_init__(self):
        if self.generator_ablation not in GENERATOR_ABLATIONS:
            raise ParameterError(f"unknown generator ablation {self.generator_ablation!r}")

    @property
    def shares_generator(self) -> bool:
        return self.use_global_generator or self.generator_ablation == "distill_only"

    @property
    def fake_supervision(self) -> bool:
        return self.use_global_generator or self.generator_ablation == "local_gan"


FULL = AblationFlags(True, True)


@dataclass
class RoundRecord:
    round: int
    selected: list[int]
    losses: dict[str, float] = field(default_factory=dict)
    distill_loss: float | None = None
    skipped_clients: list[int] = field(default_factory=list)
    fake_digests: dict[int, str] = field(default_factory=dict)
    model_digests: dict[int, str] = field(default_factory=dict)
    ledger: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "selected": list(self.selected),
            "losses": self.losses,
            "distill_loss": self.distill_loss,
            "skipped_clients": self.skipped_clients,
            "fake_digests": {str(k): v for k, v in self.fake_digests.items()},
            "model_digests": {str(k): v for k, v in self.model_digests.items()},
            "ledger": self.ledger,
        }


def digest(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def select_clients(n_clients: int, frac: float, rng: np.random.Generator) -> list[int]:
    """Uniform sample without replacement of max(1, floor(frac * K)) clients, sorted."""
    if not 0 < frac <= 1:
        raise ParameterError(f"frac must lie in (0, 1], got {frac}")
    if n_clients < 1:
        raise ParameterError("need at least one client")
    m = max(1, int(np.floor(frac * n_clients)))
    return sorted(int(k) for k in rng.choice(n_clients, size=m, replace=False))


def average_params(vectors: Sequence[ParamVector], weights: Sequence[float] | None = None) -> ParamVector:
    """Elementwise (weighted) mean of parameter vectors.

    Terms are summed in sorted order per coordinate, so the result does not
    depend on the order of ``vectors``; coordinates on which every vector
    agrees are returned unchanged.
    """
    if not vectors:
        raise ProtocolError("cannot aggregate an empty update list")
    first = vectors[0]
    for v in vectors[1:]:
        if v.spec != first.spec:
            raise ProtocolError("updates have inconsistent parameter layouts")
    stack = np.stack([v.values for v in vectors])
    if weights is None:
        mean = np.sort(stack, axis=0).sum(axis=0) / len(vectors)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (len(vectors),) or (w < 0).any() or w.sum() <= 0:
            raise ProtocolError("aggregation weights must be non-negative with a positive sum")
        terms = stack * (w / w.sum())[:, None]
        mean = np.sort(terms, axis=0).sum(axis=0)
    lo, hi = stack.min(axis=0), stack.max(axis=0)
    return first.with_values(np.where(lo == hi, lo, mean))


def aggregate_parameters(updates: Sequence[ClientUpdate]) -> tuple[ParamVector, ParamVector]:
    """Uniform 1/M mean of the uploaded generators and discriminators."""
    if not updates:
        raise ProtocolError("cannot aggregate an empty update list")
    try:
        return (
            average_params([u.generator for u in updates]),
            average_params([u.discriminator for u in updates]),
        )
    except LayoutError as exc:
        raise ProtocolError(str(exc)) from exc


def distillation_targets(
    soft_labels: dict[int, np.ndarray], mode: str = "leave_one_out"
) -> dict[int, np.ndarray] | None:
    """Per-client targets: the mean of every *other* client's soft labels.

    ``mode="printed"`` divides the leave-one-out sum by |S| instead of |S|-1
    and renormalizes the rows. Returns ``None`` when fewer than two clients
    reported, meaning distillation is skipped this round.
    """
    ids = sorted(soft_labels)
    if len(ids) < 2:
        return None
    shape = soft_labels[ids[0]].shape
    for k in ids:
        y = soft_labels[k]
        if y.shape != shape:
            raise ProtocolError("soft label matrices differ in shape")
        if np.abs(y.sum(axis=1) - 1.0).max(initial=0.0) > 1e-6:
            raise ProtocolError(f"soft labels of client {k} are not normalized")
    m = len(ids)
    targets = {}
    for k in ids:
        others = [soft_labels[i] for i in ids if i != k]
        acc = others[0].copy()
        for y in others[1:]:
            acc += y
        if mode == "leave_one_out":
            targets[k] = acc / (m - 1)
        elif mode == "printed":
            t = acc / m
            targets[k] = t / t.sum(axis=1, keepdims=True)
        else:
            raise ParameterError(f"unknown soft label mode {mode!r}")
    return targets


# ------------------------------------------------------------ client work


def local_adversarial_training(
    state: TripletState,
    dataset: LabeledDataset,
    shard: Shard,
    epochs: int,
    batch_size: int,
    rng: np.random.Generator,
    fake_supervision: bool = True,
) -> tuple[TripletState, dict[str, float]]:
    """Run ``epochs`` passes of three-player updates over the client's shard."""
    sums = {"discriminator": 0.0, "generator": 0.0, "classifier": 0.0}
    steps = 0
    for _ in range(epochs):
        for idx in batch_iter(shard.indices, batch_size, rng):
            state, rec = gan.local_adversarial_step(
                state, dataset.samples[idx], dataset.labels[idx], rng, fake_supervision=fake_supervision
            )
            sums["discriminator"] += rec.discriminator
            sums["generator"] += rec.generator
            sums["classifier"] += rec.classifier
            steps += 1
    return state, {k: v / steps for k, v in sums.items()} if steps else {}


def distill_client(
    state: TripletState, fake: FakeBatch, y_dis: np.ndarray, cfg: DistillConfig
) -> tuple[TripletState, float]:
    """One pass over the distillation set in mini-batches (sequential order)."""
    total = 0.0
    n = len(fake)
    for start in range(0, n, cfg.batch_size):
        stop = min(start + cfg.batch_size, n)
        state, loss = gan.distillation_step(state, fake.slice(start, stop), y_dis[start:stop], cfg)
        total += loss * (stop - start)
    return state, total / n


def distill_config(cfg: RunConfig) -> DistillConfig:
    return DistillConfig(cfg.alpha_kd, cfg.distill_sample_count, cfg.temperature, cfg.distill_batch_size, cfg.distill_steps)


def run_round(
    server: ServerState,
    clients: list[TripletState],
    dataset: LabeledDataset,
    shards: Sequence[Shard],
    cfg: RunConfig,
    ledger: CommLedger,
    flags: AblationFlags = FULL,
) -> tuple[ServerState, list[TripletState], RoundRecord]:
    """One communication round; ``clients`` is not mutated.

    Stages: select, broadcast, local training, upload, aggregate and
    re-broadcast, issue the noise seed, soft labels, leave-one-out targets,
    distillation. Everything random is derived from (seed, round, client,
    stage), so the result does not depend on client processing order.
    """
    t = server.round + 1
    seed = server.seed
    clients = list(clients)
    record = RoundRecord(t, [])
    stage = "select"
    try:
        selected = select_clients(len(clients), cfg.frac, derive_stream(seed, t, SERVER, "select"))
        record.selected = selected

        stage = "broadcast"
        if flags.shares_generator:
            for k in selected:
                clients[k] = replace(clients[k], generator=server.generator.copy(), discriminator=server.discriminator.copy())
                ledger.record(t, DOWNLINK, Envelope("generator", k, server.generator.values))
                ledger.record(t, DOWNLINK, Envelope("discriminator", k, server.discriminator.values))

        stage = "local_training"
        loss_sums: dict[str, list[float]] = {}
        for k in selected:
            if len(shards[k]) == 0:
                record.skipped_clients.append(k)
                continue
            rng = derive_stream(seed, t, k, "local")
            clients[k], losses = local_adversarial_training(
                clients[k], dataset, shards[k], cfg.local_epochs, cfg.batch_size, rng, flags.fake_supervision
            )
            for name, v in losses.items():
                loss_sums.setdefault(name, []).append(v)
        record.losses = {name: float(np.mean(v)) for name, v in loss_sums.items()}

        if flags.shares_generator:
            stage = "upload"
            updates = [ClientUpdate(k, clients[k].generator.copy(), clients[k].discriminator.copy()) for k in selected]
            for u in updates:
                for env in u.envelopes():
                    ledger.record(t, UPLINK, env)

            stage = "aggregate"
            theta_g, theta_d = aggregate_parameters(updates)
            server = ServerState(theta_g, theta_d, t, seed)
            for k in selected:
                clients[k] = replace(clients[k], generator=theta_g.copy(), discriminator=theta_d.copy())
                ledger.record(t, DOWNLINK, Envelope("generator", k, theta_g.values))
                ledger.record(t, DOWNLINK, Envelope("discriminator", k, theta_d.values))
                record.model_digests[k] = digest(theta_g.values, theta_d.values)
        else:
            server = replace(server, round=t)

        if flags.use_co_distillation and len(selected) >= 2:
            stage = "noise_seed"
            dcfg = distill_config(cfg)
            if not flags.fake_supervision:
                dcfg = replace(dcfg, alpha_kd=1.0)
            plan = RoundPlan(t, tuple(selected), derive_seed(seed, t, SERVER, "distill-noise"), dcfg.sample_count, dcfg.batch_size)
            for k in selected:
                ledger.record(t, DOWNLINK, Envelope("noise_seed", k, np.array([plan.noise_seed], dtype=np.float64)))

            stage = "soft_labels"
            n_classes = clients[0].classifier.spec.n_out
            z_dim = clients[0].generator.spec.n_in - n_classes
            fakes: dict[int, FakeBatch] = {}
            soft: dict[int, np.ndarray] = {}
            for k in selected:
                z = gan.sample_noise(np.random.default_rng(plan.noise_seed), plan.distill_sample_count, z_dim)
                labels = gan.balanced_labels(plan.distill_sample_count, n_classes)
                fakes[k] = gan.generate(clients[k].generator, z, labels)
                record.fake_digests[k] = digest(fakes[k].samples, fakes[k].labels)
                soft[k] = gan.soft_label_output(clients[k].classifier, fakes[k], dcfg.temperature)
                ledger.record(t, UPLINK, Envelope("soft_labels", k, soft[k]))

            stage = "targets"
            targets = distillation_targets(soft, cfg.soft_label_mode)

            stage = "distillation"
            dl = []
            for k in selected:
                ledger.record(t, DOWNLINK, Envelope("soft_labels", k, targets[k]))
                clients[k], loss = distill_client(clients[k], fakes[k], targets[k], dcfg)
                dl.append(loss)
            record.distill_loss = float(np.mean(dl))
    except FedDTGError as exc:
        raise RoundError(t, stage, exc) from exc

    record.ledger = ledger.totals(t)
    return server, clients, record


def init_federation(spec: gan.TripletSpec, cfg: RunConfig) -> tuple[ServerState, list[TripletState]]:
    """Shared seeded initialization: every client starts from the same triplet."""
    base = gan.init_triplet(
        spec,
        derive_stream(cfg.seed, 0, SERVER, "init"),
        0,
        cfg.optimizer,
        cfg.lr_generator,
        cfg.lr_discriminator,
        cfg.lr_classifier,
        tuple(cfg.gan_betas),
        tuple(cfg.classifier_betas),
    )
    server = ServerState(base.generator.copy(), base.discriminator.copy(), 0, cfg.seed)
    return server, [base.copy(client_id=k) for k in range(cfg.n_clients)]
