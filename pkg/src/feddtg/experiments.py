"""Evaluation, metrics series and the experiment driver."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .baselines import ClassifierClient, fedavg_round, local_only_round
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import (
    LabeledDataset,
    MixtureSpec,
    PartitionPlan,
    Shard,
    dirichlet_partition,
    iid_partition,
    load_idx_dataset,
    one_class_partition,
    quantity_skew_partition,
    subsample,
    synth_gaussian_mixture,
)
from .exceptions import CheckpointError, ParameterError
from .gan import TripletSpec, TripletState
from .nn import OptimizerState, ParamVector
from .protocol import LEDGER_FIELDS, AblationFlags, CommLedger, RoundRecord, ServerState, init_federation, run_round

# ------------------------------------------------------------------ metrics


def evaluate(theta_c: ParamVector, test: LabeledDataset, chunk: int = 4096) -> float:
    """Fraction of argmax-correct predictions (ties go to the lowest class index)."""
    if len(test) == 0:
        raise ParameterError("cannot evaluate on an empty test set")
    correct = 0
    for start in range(0, len(test), chunk):
        logits = nn.forward(theta_c.spec, theta_c, test.samples[start : start + chunk])
        correct += int((np.argmax(logits, axis=1) == test.labels[start : start + chunk]).sum())
    return correct / len(test)


@dataclass(frozen=True)
class ClientSummary:
    mean: float
    min: float
    max: float
    std: float
    values: tuple[float, ...]


def summarize_clients(accuracies: Sequence[float]) -> ClientSummary:
    """Mean, extremes and population standard deviation across clients."""
    a = np.asarray(accuracies, dtype=np.float64)
    if a.size == 0:
        raise ParameterError("need at least one client accuracy")
    lo, hi = float(a.min()), float(a.max())
    if lo == hi:
        # Avoid rounding noise such as mean([0.4] * 3) != 0.4.
        return ClientSummary(lo, lo, hi, 0.0, tuple(float(v) for v in a))
    return ClientSummary(float(a.mean()), lo, hi, float(a.std()), tuple(float(v) for v in a))


def summarize_seeds(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation of a per-seed statistic."""
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std(ddof=1)) if a.size > 1 else 0.0


@dataclass
class MetricsRecord:
    round: int
    accuracies: list[float]
    mean: float
    min: float
    max: float
    std: float
    ledger: dict[str, int]
    losses: dict[str, float] = field(default_factory=dict)
    local_accuracies: list[float] | None = None
    global_accuracy: float | None = None
    wall_clock: float = 0.0

    def to_dict(self) -> dict:
        # wall_clock is deliberately left out so that emitted files are reproducible.
        return {
            "round": self.round,
            "mean_acc": self.mean,
            "min_acc": self.min,
            "max_acc": self.max,
            "std_acc": self.std,
            "accuracies": self.accuracies,
            "local_accuracies": self.local_accuracies,
            "global_accuracy": self.global_accuracy,
            "losses": self.losses,
            "ledger": self.ledger,
        }

    @classmethod
    def from_dict(cls, d: dict, wall_clock: float = 0.0) -> "MetricsRecord":
        return cls(
            d["round"],
            list(d["accuracies"]),
            d["mean_acc"],
            d["min_acc"],
            d["max_acc"],
            d["std_acc"],
            dict(d["ledger"]),
            dict(d["losses"]),
            d["local_accuracies"],
            d["global_accuracy"],
            wall_clock,
        )


def csv_header(n_clients: int) -> list[str]:
    return ["round", "mean_acc", "min_acc", "max_acc", "std_acc"] + [f"acc_client_{k}" for k in range(n_clients)] + list(LEDGER_FIELDS)


def metrics_csv(series: Sequence[MetricsRecord]) -> str:
    if not series:
        raise ParameterError("cannot emit an empty metrics series")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(csv_header(len(series[0].accuracies)))
    for r in series:
        w.writerow([r.round, repr(r.mean), repr(r.min), repr(r.max), repr(r.std)] + [repr(a) for a in r.accuracies] + [r.ledger[f] for f in LEDGER_FIELDS])
    return buf.getvalue()


def metrics_jsonl(series: Sequence[MetricsRecord]) -> str:
    if not series:
        raise ParameterError("cannot emit an empty metrics series")
    return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in series)


def emit_metrics(series: Sequence[MetricsRecord], out_dir, formats: Sequence[str] = ("csv", "jsonl")) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in formats:
        if fmt == "csv":
            path, text = out_dir / "metrics.csv", metrics_csv(series)
        elif fmt == "jsonl":
            path, text = out_dir / "metrics.jsonl", metrics_jsonl(series)
        else:
            raise ParameterError(f"unknown metrics format {fmt!r}")
        path.write_text(text)
        written.append(path)
    return written


def read_metrics_csv(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            parsed = {}
            for key, value in row.items():
                if key == "round" or key in LEDGER_FIELDS:
                    parsed[key] = int(value)
                else:
                    parsed[key] = float(value)
            rows.append(parsed)
    return rows


# ----------------------------------------------------------------- datasets


def load_datasets(cfg: RunConfig) -> tuple[LabeledDataset, LabeledDataset]:
    """Training set (after stratified subsampling by ``sampling_ratio``) and full test set."""
    if cfg.dataset == "mixture":
        train = synth_gaussian_mixture(MixtureSpec.default(cfg.mixture_samples_per_class, cfg.mixture_std), cfg.partition_seed)
        test = synth_gaussian_mixture(MixtureSpec.default(cfg.mixture_test_per_class, cfg.mixture_std), cfg.partition_seed + 1_000_003)
    else:
        train = load_idx_dataset(cfg.train_images, cfg.train_labels, cfg.n_classes)
        test = load_idx_dataset(cfg.test_images, cfg.test_labels, train.n_classes)
        if test.n_classes != train.n_classes:
            train = LabeledDataset(train.samples, train.labels, test.n_classes, train.scale, train.offset)
    if cfg.sampling_ratio < 1:
        train = subsample(train, cfg.sampling_ratio, cfg.partition_seed)
    return train, test


def make_partition(cfg: RunConfig, ds: LabeledDataset, seed_offset: int = 0) -> list[Shard]:
    seed = cfg.partition_seed + seed_offset
    if cfg.partition == "dirichlet":
        return dirichlet_partition(ds, PartitionPlan(cfg.dirichlet_alpha, cfg.n_clients, cfg.sampling_ratio, seed))
    if cfg.partition == "iid":
        return iid_partition(ds, cfg.n_clients, seed)
    if cfg.partition == "one_class":
        return one_class_partition(ds, cfg.n_clients)
    return quantity_skew_partition(ds, cfg.quantity_sizes, seed)


def local_test_shards(cfg: RunConfig, test: LabeledDataset) -> list[Shard]:
    """Per-client test shards drawn like the training partition.

    Dirichlet proportions reuse the training seed, so every client's test
    class mix follows the same draw as its training data.
    """
    if cfg.partition == "quantity_skew":
        return iid_partition(test, cfg.n_clients, cfg.partition_seed)
    return make_partition(cfg, test)


def triplet_spec(cfg: RunConfig, sample_dim: int, n_classes: int) -> TripletSpec:
    return TripletSpec.build(
        sample_dim,
        n_classes,
        cfg.z_dim,
        cfg.generator_hidden,
        cfg.discriminator_hidden,
        cfg.classifier_hidden,
    )


def algorithm_tag(cfg: RunConfig) -> str:
    if cfg.algorithm != "feddtg":
        return cfg.algorithm
    parts = []
    if not cfg.use_global_generator:
        parts.append("no-global-gen" if cfg.generator_ablation == "local_gan" else "distill-only")
    if not cfg.use_co_distillation:
        parts.append("no-codistill")
    return "-".join(["feddtg", *parts])


# --------------------------------------------------------------- simulation


def _opt_meta(opt: OptimizerState) -> dict:
    return {"rule": opt.rule, "lr": opt.lr, "step": opt.step, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps}


def _opt_arrays(prefix: str, opt: OptimizerState) -> dict:
    if opt.m is None:
        return {}
    return {f"{prefix}/m": opt.m, f"{prefix}/v": opt.v}


def _opt_restore(meta: dict, arrays: dict, prefix: str) -> OptimizerState:
    return OptimizerState(
        meta["rule"], meta["lr"], meta["step"], meta["beta1"], meta["beta2"], meta["eps"],
        arrays.get(f"{prefix}/m"), arrays.get(f"{prefix}/v"),
    )


class Simulation:
    """All mutable state of one federated run, advanced one round at a time."""

    def __init__(self, cfg: RunConfig, train: LabeledDataset, shards: Sequence[Shard]):
        self.cfg = cfg
        self.train = train
        self.shards = list(shards)
        self.spec = triplet_spec(cfg, train.sample_dim, train.n_classes)
        self.ledger = CommLedger()
        self.round = 0
        self.flags = AblationFlags(cfg.use_global_generator, cfg.use_co_distillation, cfg.generator_ablation)
        server, triplets = init_federation(self.spec, cfg)
        self.server: ServerState | None = None
        self.triplets: list[TripletState] = []
        self.classifier_clients: list[ClassifierClient] = []
        self.global_classifier: ParamVector | None = None
        if cfg.algorithm == "feddtg":
            self.server, self.triplets = server, triplets
        else:
            base = triplets[0]
            self.classifier_clients = [ClassifierClient(k, base.classifier.copy(), base.clf_opt.copy()) for k in range(cfg.n_clients)]
            if cfg.algorithm in ("fedavg", "fedprox"):
                self.global_classifier = base.classifier.copy()

    def step(self) -> RoundRecord:
        cfg = self.cfg
        t = self.round + 1
        if cfg.algorithm == "feddtg":
            self.server, self.triplets, rec = run_round(self.server, self.triplets, self.train, self.shards, cfg, self.ledger, self.flags)
        elif cfg.algorithm in ("fedavg", "fedprox"):
            mu = cfg.fedprox_mu if cfg.algorithm == "fedprox" else 0.0
            self.global_classifier, self.classifier_clients, rec = fedavg_round(
                self.global_classifier, self.classifier_clients, self.train, self.shards, cfg, self.ledger, t, mu
            )
        else:
            self.classifier_clients, rec = local_only_round(self.classifier_clients, self.train, self.shards, cfg, t)
            rec.ledger = self.ledger.totals(t)
        self.round = t
        return rec

    def classifiers(self) -> list[ParamVector]:
        if self.cfg.algorithm == "feddtg":
            return [s.classifier for s in self.triplets]
        return [c.classifier for c in self.classifier_clients]

    # -- persistence

    def state(self) -> tuple[dict, dict[str, np.ndarray]]:
        meta: dict = {"round": self.round, "ledger": self.ledger.to_list(), "opts": {}}
        arrays: dict[str, np.ndarray] = {}
        if self.server is not None:
            arrays["server/generator"] = self.server.generator.values
            arrays["server/discriminator"] = self.server.discriminator.values
            meta["server_round"] = self.server.round
        if self.global_classifier is not None:
            arrays["global/classifier"] = self.global_classifier.values
        for s in self.triplets:
            p = f"client/{s.client_id}"
            arrays[f"{p}/generator"] = s.generator.values
            arrays[f"{p}/discriminator"] = s.discriminator.values
            arrays[f"{p}/classifier"] = s.classifier.values
            for name in ("gen_opt", "disc_opt", "clf_opt"):
                opt = getattr(s, name)
                meta["opts"][f"{p}/{name}"] = _opt_meta(opt)
                arrays.update(_opt_arrays(f"{p}/{name}", opt))
        for c in self.classifier_clients:
            p = f"client/{c.client_id}"
            arrays[f"{p}/classifier"] = c.classifier.values
            meta["opts"][f"{p}/clf_opt"] = _opt_meta(c.opt)
            arrays.update(_opt_arrays(f"{p}/clf_opt", c.opt))
        return meta, arrays

    def restore(self, meta: dict, arrays: dict[str, np.ndarray]) -> None:
        spec = self.spec
        self.round = int(meta["round"])
        self.ledger = CommLedger.from_list(meta["ledger"])
        opts = meta["opts"]
        try:
            if self.server is not None:
                self.server = ServerState(
                    ParamVector(spec.generator, arrays["server/generator"]),
                    ParamVector(spec.discriminator, arrays["server/discriminator"]),
                    int(meta["server_round"]),
                    self.cfg.seed,
                )
                self.triplets = [
                    TripletState(
                        k,
                        ParamVector(spec.generator, arrays[f"client/{k}/generator"]),
                        ParamVector(spec.discriminator, arrays[f"client/{k}/discriminator"]),
                        ParamVector(spec.classifier, arrays[f"client/{k}/classifier"]),
                        _opt_restore(opts[f"client/{k}/gen_opt"], arrays, f"client/{k}/gen_opt"),
                        _opt_restore(opts[f"client/{k}/disc_opt"], arrays, f"client/{k}/disc_opt"),
                        _opt_restore(opts[f"client/{k}/clf_opt"], arrays, f"client/{k}/clf_opt"),
                    )
                    for k in range(self.cfg.n_clients)
                ]
            else:
                self.classifier_clients = [
                    ClassifierClient(
                        k,
                        ParamVector(spec.classifier, arrays[f"client/{k}/classifier"]),
                        _opt_restore(opts[f"client/{k}/clf_opt"], arrays, f"client/{k}/clf_opt"),
                    )
                    for k in range(self.cfg.n_clients)
                ]
                if self.global_classifier is not None:
                    self.global_classifier = ParamVector(spec.classifier, arrays["global/classifier"])
        except KeyError as exc:
            raise CheckpointError(f"checkpoint is missing array {exc}") from exc


# ------------------------------------------------------------------- driver


def evaluate_simulation(sim: Simulation, test: LabeledDataset, local_tests: Sequence[LabeledDataset] | None, rec: RoundRecord | None) -> MetricsRecord:
    accs = [evaluate(theta, test) for theta in sim.classifiers()]
    s = summarize_clients(accs)
    local = None
    if local_tests is not None:
        local = [evaluate(theta, lt) if len(lt) else math.nan for theta, lt in zip(sim.classifiers(), local_tests)]
    glob = evaluate(sim.global_classifier, test) if sim.global_classifier is not None else None
    return MetricsRecord(
        sim.round,
        accs,
        s.mean,
        s.min,
        s.max,
        s.std,
        sim.ledger.totals(),
        dict(rec.losses) if rec is not None else {},
        local,
        glob,
        time.perf_counter(),
    )


def run_dir(cfg: RunConfig, out_dir=None) -> Path:
    base = Path(out_dir) if out_dir is not None else Path(cfg.output_root)
    return base / cfg.run_id / algorithm_tag(cfg)


def _write_outputs(out: Path, cfg: RunConfig, series, records) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    emit_metrics(series, out)
    (out / "rounds.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def run_experiment(
    cfg: RunConfig,
    train: LabeledDataset | None = None,
    test: LabeledDataset | None = None,
    out_dir=None,
    resume_from=None,
    stop_after: int | None = None,
    write: bool = True,
) -> list[MetricsRecord]:
    """Run ``cfg.rounds`` rounds and return the metrics series.

    Evaluation happens at round 0 and every ``eval_every`` rounds. With
    ``write`` the series, the per-round records and a final checkpoint go to
    ``<out>/<run_id>/<algorithm>/``. ``stop_after`` ends the run early
    (after writing a checkpoint), which together with ``resume_from`` allows
    interrupted runs to continue bit-exactly.
    """
    cfg.validate()
    if train is None or test is None:
        train, test = load_datasets(cfg)
    shards = make_partition(cfg, train)
    local_tests = [test.subset(s.indices) for s in local_test_shards(cfg, test)] if cfg.local_eval else None
    sim = Simulation(cfg, train, shards)
    out = run_dir(cfg, out_dir)

    series: list[MetricsRecord] = []
    records: list[dict] = []
    if resume_from is not None:
        meta, arrays = load_checkpoint(resume_from)
        if RunConfig.from_dict(meta["config"]).to_dict() != cfg.to_dict():
            raise CheckpointError("checkpoint was written by a different configuration")
        sim.restore(meta["simulation"], arrays)
        series = [MetricsRecord.from_dict(d) for d in meta["series"]]
        records = list(meta["records"])
    else:
        series.append(evaluate_simulation(sim, test, local_tests, None))

    last = cfg.rounds if stop_after is None else min(cfg.rounds, stop_after)
    while sim.round < last:
        rec = sim.step()
        records.append(rec.to_dict())
        if sim.round % cfg.eval_every == 0:
            series.append(evaluate_simulation(sim, test, local_tests, rec))
        if write and cfg.checkpoint_every and sim.round % cfg.checkpoint_every == 0:
            write_checkpoint(out / "checkpoint.npz", sim, series, records, train)

    if write:
        _write_outputs(out, cfg, series, records)
        write_checkpoint(out / "checkpoint.npz", sim, series, records, train)
    return series


def write_checkpoint(path, sim: Simulation, series, records, train: LabeledDataset) -> Path:
    meta, arrays = sim.state()
    doc = {
        "config": sim.cfg.to_dict(),
        "simulation": meta,
        "series": [r.to_dict() for r in series],
        "records": records,
        "sample_dim": train.sample_dim,
        "n_classes": train.n_classes,
    }
    return save_checkpoint(path, doc, arrays)


def load_classifiers(path) -> tuple[RunConfig, list[ParamVector], list[dict]]:
    """Client classifiers stored in a checkpoint, with the config and series that produced them."""
    meta, arrays = load_checkpoint(path)
    try:
        cfg = RunConfig.from_dict(meta["config"])
        spec = triplet_spec(cfg, int(meta["sample_dim"]), int(meta["n_classes"]))
        thetas = [ParamVector(spec.classifier, arrays[f"client/{k}/classifier"]) for k in range(cfg.n_clients)]
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: incomplete checkpoint ({exc})") from exc
    return cfg, thetas, meta["series"]
