"""Experiment configuration: defaults, JSON loading and exhaustive validation."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .exceptions import ConfigError

ALGORITHMS = ("feddtg", "fedavg", "fedprox", "local")
DATASETS = ("mixture", "idx")
PARTITIONS = ("dirichlet", "iid", "one_class", "quantity_skew")
SOFT_LABEL_MODES = ("leave_one_out", "printed")
WEIGHTINGS = ("uniform", "data_size")


def default_output_root() -> str:
    return os.environ.get("FEDDTG_OUT_DIR", "runs")


@dataclass
class RunConfig:
    run_id: str = "run"
    output_root: str = field(default_factory=default_output_root)

    # data
    dataset: str = "mixture"
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    n_classes: int | None = None
    mixture_samples_per_class: int = 500
    mixture_test_per_class: int = 250
    mixture_std: float = 0.1

    # partition
    partition: str = "dirichlet"
    n_clients: int = 20
    frac: float = 0.5
    sampling_ratio: float = 0.25
    dirichlet_alpha: float = 0.05
    quantity_sizes: list[int] | None = None

    # algorithm
    algorithm: str = "feddtg"
    use_global_generator: bool = True
    use_co_distillation: bool = True
    generator_ablation: str = "local_gan"
    rounds: int = 100
    batch_size: int = 32
    local_epochs: int = 1
    z_dim: int = 100
    distill_sample_count: int = 10000
    distill_batch_size: int = 32
    distill_steps: int = 1
    alpha_kd: float = 0.9
    temperature: float = 1.0
    soft_label_mode: str = "leave_one_out"
    fedprox_mu: float = 0.01
    aggregation_weighting: str = "uniform"

    # networks and optimizers
    generator_hidden: list[int] = field(default_factory=lambda: [128, 256])
    discriminator_hidden: list[int] = field(default_factory=lambda: [256, 128])
    classifier_hidden: list[int] = field(default_factory=lambda: [256, 128])
    optimizer: str = "adam"
    lr_generator: float = 2e-4
    lr_discriminator: float = 2e-4
    lr_classifier: float = 1e-3
    gan_betas: list[float] = field(default_factory=lambda: [0.5, 0.999])
    classifier_betas: list[float] = field(default_factory=lambda: [0.9, 0.999])

    # seeds and evaluation
    seed: int = 0
    data_seed: int | None = None
    eval_every: int = 1
    local_eval: bool = False
    checkpoint_every: int = 0

    @property
    def partition_seed(self) -> int:
        return self.seed if self.data_seed is None else self.data_seed

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict, validate: bool = True) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError([f"{k}: unknown key" for k in unknown])
        cfg = cls(**d)
        if validate:
            cfg.validate()
        return cfg

    def validate(self) -> "RunConfig":
        errors = validation_errors(self)
        if errors:
            raise ConfigError(errors)
        return self


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def validation_errors(cfg: RunConfig) -> list[str]:
    """Every violated field, one message each."""
    errs: list[str] = []

    def need(ok: bool, name: str, msg: str):
        if not ok:
            errs.append(f"{name}: {msg} (got {getattr(cfg, name)!r})")

    def choice(name, options):
        need(getattr(cfg, name) in options, name, f"must be one of {', '.join(options)}")

    def int_at_least(name, lo):
        v = getattr(cfg, name)
        need(_is_int(v) and v >= lo, name, f"must be an integer >= {lo}")

    def positive(name):
        v = getattr(cfg, name)
        need(_is_num(v) and v > 0, name, "must be a positive number")

    def int_list(name, allow_none=False, lo=1):
        v = getattr(cfg, name)
        if v is None and allow_none:
            return
        need(isinstance(v, list) and all(_is_int(x) and x >= lo for x in v), name, f"must be a list of integers >= {lo}")

    need(isinstance(cfg.run_id, str) and cfg.run_id != "" and "/" not in cfg.run_id, "run_id", "must be a non-empty name without '/'")
    need(isinstance(cfg.output_root, str) and cfg.output_root != "", "output_root", "must be a non-empty path")

    choice("dataset", DATASETS)
    if cfg.dataset == "idx":
        for name in ("train_images", "train_labels", "test_images", "test_labels"):
            need(isinstance(getattr(cfg, name), str), name, "required when dataset is 'idx'")
    need(cfg.n_classes is None or (_is_int(cfg.n_classes) and cfg.n_classes >= 1), "n_classes", "must be null or an integer >= 1")
    int_at_least("mixture_samples_per_class", 1)
    int_at_least("mixture_test_per_class", 1)
    need(_is_num(cfg.mixture_std) and cfg.mixture_std >= 0, "mixture_std", "must be a non-negative number")

    choice("partition", PARTITIONS)
    int_at_least("n_clients", 1)
    need(_is_num(cfg.frac) and 0 < cfg.frac <= 1, "frac", "must lie in (0, 1]")
    need(_is_num(cfg.sampling_ratio) and 0 < cfg.sampling_ratio <= 1, "sampling_ratio", "must lie in (0, 1]")
    positive("dirichlet_alpha")
    int_list("quantity_sizes", allow_none=True, lo=0)
    if cfg.partition == "quantity_skew":
        sizes = cfg.quantity_sizes
        need(isinstance(sizes, list) and len(sizes) == cfg.n_clients, "quantity_sizes", "must list one size per client")
    if cfg.partition == "one_class" and cfg.dataset == "mixture":
        need(cfg.n_clients == 4, "n_clients", "one_class on the 4-class mixture needs 4 clients")

    choice("algorithm", ALGORITHMS)
    need(isinstance(cfg.use_global_generator, bool), "use_global_generator", "must be a boolean")
    need(isinstance(cfg.use_co_distillation, bool), "use_co_distillation", "must be a boolean")
    choice("generator_ablation", ("local_gan", "distill_only"))
    int_at_least("rounds", 0)
    int_at_least("batch_size", 1)
    int_at_least("local_epochs", 0)
    int_at_least("z_dim", 1)
    int_at_least("distill_sample_count", 1)
    int_at_least("distill_batch_size", 1)
    int_at_least("distill_steps", 1)
    need(_is_num(cfg.alpha_kd) and 0 <= cfg.alpha_kd <= 1, "alpha_kd", "must lie in [0, 1]")
    positive("temperature")
    choice("soft_label_mode", SOFT_LABEL_MODES)
    need(_is_num(cfg.fedprox_mu) and cfg.fedprox_mu >= 0, "fedprox_mu", "must be >= 0")
    choice("aggregation_weighting", WEIGHTINGS)

    int_list("generator_hidden")
    int_list("discriminator_hidden")
    int_list("classifier_hidden")
    choice("optimizer", ("adam", "sgd"))
    positive("lr_generator")
    positive("lr_discriminator")
    positive("lr_classifier")
    for name in ("gan_betas", "classifier_betas"):
        v = getattr(cfg, name)
        need(isinstance(v, list) and len(v) == 2 and all(_is_num(b) and 0 <= b < 1 for b in v), name, "must be two numbers in [0, 1)")

    int_at_least("seed", 0)
    need(cfg.data_seed is None or (_is_int(cfg.data_seed) and cfg.data_seed >= 0), "data_seed", "must be null or an integer >= 0")
    int_at_least("eval_every", 1)
    need(isinstance(cfg.local_eval, bool), "local_eval", "must be a boolean")
    int_at_least("checkpoint_every", 0)
    return errs


def load_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: not valid JSON ({exc})"]) from exc
    if not isinstance(doc, dict):
        raise ConfigError([f"{path}: top level must be a JSON object"])
    return RunConfig.from_dict(doc)
