"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 validation failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import sys
from dataclasses import replace
from pathlib import Path

from .config import RunConfig, load_config
from .data import PartitionPlan, class_count_matrix, format_count_table, load_idx_dataset, partition_to_json
from .exceptions import ConfigError, FedDTGError
from .experiments import evaluate, load_classifiers, load_datasets, make_partition, run_dir, run_experiment, summarize_clients

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_VALIDATION = 2


def _threads(n: int | None):
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _load(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, output_root=args.out)
    return cfg.validate()


def cmd_defaults(args) -> int:
    text = RunConfig().to_json()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


class StageFailure(Exception):
    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        super().__init__(f"{stage}: {cause}")


def cmd_run(args) -> int:
    cfg = _load(args)
    stage = "load data"
    try:
        train, test = load_datasets(cfg)
        stage = "run"
        with _threads(args.threads):
            series = run_experiment(cfg, train, test, resume_from=args.resume, stop_after=args.stop_after)
    except (ConfigError, StageFailure):
        raise
    except (FedDTGError, OSError) as exc:
        raise StageFailure(stage, exc) from exc
    last = series[-1]
    out = run_dir(cfg)
    if args.json:
        print(json.dumps({"round": last.round, "mean_acc": last.mean, "min_acc": last.min, "max_acc": last.max, "std_acc": last.std, "out": str(out)}))
    else:
        print(f"round {last.round}: mean {last.mean:.4f}  min {last.min:.4f}  max {last.max:.4f}  std {last.std:.4f}")
        print(f"metrics written to {out}")
    return EXIT_OK


def cmd_partition(args) -> int:
    cfg = _load(args)
    train, _ = load_datasets(cfg)
    shards = make_partition(cfg, train)
    plan = PartitionPlan(cfg.dirichlet_alpha, cfg.n_clients, cfg.sampling_ratio, cfg.partition_seed)
    doc = partition_to_json(train, shards, plan)
    table = format_count_table(class_count_matrix(train, shards))
    out = Path(cfg.output_root) / cfg.run_id / "partition"
    out.mkdir(parents=True, exist_ok=True)
    (out / "partition.json").write_text(doc)
    (out / "partition.txt").write_text(table)
    sys.stdout.write(doc if args.json else table)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, thetas, series = load_classifiers(args.checkpoint)
    if (args.test_images is None) != (args.test_labels is None):
        raise ConfigError(["--test-images and --test-labels must be given together"])
    if args.test_images is not None:
        test = load_idx_dataset(args.test_images, args.test_labels, thetas[0].spec.n_out)
    else:
        _, test = load_datasets(cfg)
    if len(test) == 0:
        raise ConfigError(["evaluation dataset is empty"])
    with _threads(args.threads):
        accs = [evaluate(theta, test) for theta in thetas]
    s = summarize_clients(accs)
    if args.json:
        print(json.dumps({"accuracies": accs, "mean_acc": s.mean, "min_acc": s.min, "max_acc": s.max, "std_acc": s.std}))
    else:
        for k, a in enumerate(accs):
            print(f"client {k:3d}: {a:.4f}")
        print(f"mean {s.mean:.4f}  min {s.min:.4f}  max {s.max:.4f}  std {s.std:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="feddtg", description="Federated classifiers that share a conditional GAN and distill on its samples.")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("defaults", help="print the default configuration as JSON")
    d.add_argument("--out", help="write to this file instead of stdout")
    d.set_defaults(func=cmd_defaults)

    def common(sp):
        sp.add_argument("--config", required=True, help="JSON run configuration")
        sp.add_argument("--seed", type=int, help="override the configured seed")
        sp.add_argument("--out", help="output root (default: config output_root or $FEDDTG_OUT_DIR)")
        sp.add_argument("--json", action="store_true", help="machine-readable output")
        sp.add_argument("--threads", type=int, help="limit BLAS threads")

    r = sub.add_parser("run", help="run an experiment and write its metrics")
    common(r)
    r.add_argument("--resume", help="continue from a checkpoint written by the same configuration")
    r.add_argument("--stop-after", type=int, help="stop (and checkpoint) after this round")
    r.set_defaults(func=cmd_run)

    pt = sub.add_parser("partition", help="write the per-client class-count matrix without training")
    common(pt)
    pt.set_defaults(func=cmd_partition)

    e = sub.add_parser("eval", help="evaluate the client classifiers stored in a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--test-images", help="IDX image file (default: the checkpoint's test set)")
    e.add_argument("--test-labels", help="IDX label file")
    e.add_argument("--json", action="store_true")
    e.add_argument("--threads", type=int)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (StageFailure, FedDTGError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
