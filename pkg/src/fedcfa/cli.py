"""Command-line experiment runner.

    fedcfa --preset simpson --algo fedcfa --rounds 50 --seed 7 --out runs/s7
    fedcfa --preset ablation --out runs/ablation
    fedcfa --config my.cfg --algo fedprox
    fedcfa --preset simpson --pretrain-only --checkpoint start.fcfa

Exit codes: 0 ok, 2 invalid configuration, 3 dataset missing,
4 numeric failure, 5 pretraining target not reached.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from .config import ALGORITHMS, ConfigError, ExperimentConfig
from .experiments import (
    DatasetMissing,
    PretrainFailed,
    ablation,
    build_data,
    grid,
    make_model,
    pretrain,
    run,
    write_outputs,
)
from .metrics import top1_accuracy
from .models import CheckpointError, SplitModel
from .nn import NonFiniteError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_PRETRAIN = 0, 2, 3, 4, 5

PRESET_NAMES = ("simpson", "dirichlet", "iid", "ablation", "grid")

# Desk-scale Simpson setting, calibrated so that plain FedAvg visibly drifts
# away from the pretrained accuracy within 50 rounds.
SIMPSON = dict(partition="simpson", clients=5, rounds=50, batch_size=32, lr=0.05, epochs=1,
               pretrain=True, pretrain_target=0.9, hidden="256,64,128", hook=2, topk=24)

PRESETS = {
    "simpson": SIMPSON,
    "ablation": SIMPSON,
    "grid": dict(SIMPSON, rounds=30),
    "dirichlet": dict(partition="dirichlet", clients=10, alpha=0.6, rounds=50, batch_size=32, lr=0.05,
                      samples=3000, pretrain=False),
    "iid": dict(partition="iid", clients=10, rounds=50, batch_size=32, lr=0.05, samples=3000, pretrain=False),
}

# flag -> config key, for the flags that override a single field
OVERRIDES = {
    "algo": "algo",
    "rounds": "rounds",
    "clients": "clients",
    "alpha": "alpha",
    "topk": "topk",
    "hook": "hook",
    "lambda_pos": "lambda_pos",
    "lambda_neg": "lambda_neg",
    "lambda_corr": "lambda_corr",
    "seed": "seed",
    "data_dir": "data_dir",
    "lr": "lr",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "dataset": "dataset",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedcfa", description="Federated counterfactual-augmentation experiments.")
    p.add_argument("--preset", choices=PRESET_NAMES, default=None, help="named desk-scale experiment")
    p.add_argument("--config", type=Path, default=None, help="key = value config file; flags override it")
    # algorithm names are validated by the config so the error names every option
    p.add_argument("--algo", default=None, metavar="{" + ",".join(ALGORITHMS) + "}")
    p.add_argument("--rounds", type=int)
    p.add_argument("--clients", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--topk", type=int)
    p.add_argument("--hook", type=int)
    p.add_argument("--lambda-pos", dest="lambda_pos", type=float)
    p.add_argument("--lambda-neg", dest="lambda_neg", type=float)
    p.add_argument("--lambda-corr", dest="lambda_corr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", default="1,2,3", help="comma list of seeds for --preset ablation/grid")
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--dataset", choices=("synthetic", "mnist"))
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: $FEDCFA_THREADS or 1)")
    p.add_argument("--checkpoint", type=Path, default=None,
                   help="with --pretrain-only: where to write the model; otherwise: initial model to load")
    p.add_argument("--checkpoint-every", type=int, default=0, help="save the server model every N rounds")
    p.add_argument("--pretrain-only", action="store_true", help="pretrain, write --checkpoint and stop")
    p.add_argument("--write-config", type=Path, default=None, help="dump the resolved config and exit")
    p.add_argument("--quiet", action="store_true")
    return p


def resolve_config(args) -> ExperimentConfig:
    # a config file replaces the preset's values; the preset still picks the command
    if args.config:
        cfg = ExperimentConfig.load(args.config)
    else:
        cfg = ExperimentConfig(**PRESETS.get(args.preset or "simpson", {}))
    changes = {key: getattr(args, flag) for flag, key in OVERRIDES.items() if getattr(args, flag) is not None}
    cfg = cfg.replace(**changes)
    cfg.validate()
    return cfg


def thread_count(args) -> int:
    raw = args.threads if args.threads is not None else os.environ.get("FEDCFA_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"FEDCFA_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("thread count must be at least 1")
    return n


def _say(quiet, msg):
    if not quiet:
        print(msg, file=sys.stderr, flush=True)


def _parse_seeds(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"--seeds must be a comma list of integers, got {text!r}") from None
    if not seeds:
        raise ConfigError("--seeds is empty")
    return seeds


def cmd_pretrain(cfg, args) -> int:
    if args.checkpoint is None:
        raise ConfigError("--pretrain-only needs --checkpoint PATH")
    data = build_data(cfg)
    model = make_model(cfg, data.test.in_dim, data.test.num_classes)
    acc = pretrain(cfg, model, data.pretrain_set, data.test)
    model.save(args.checkpoint)
    print(f"pretrained accuracy {acc:.4f} -> {args.checkpoint}")
    return EXIT_OK


def cmd_run(cfg, args, threads) -> int:
    data = build_data(cfg)
    initial = None
    if args.checkpoint is not None:
        initial = SplitModel.load(args.checkpoint)
        if initial.factor_dim != cfg.widths[cfg.hook - 1] or initial.layer_specs[0].in_dim != data.test.in_dim:
            raise ConfigError("checkpoint architecture does not match the config")
    ckpt_dir = None
    if args.checkpoint_every:
        ckpt_dir = args.out / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    def progress(row):
        _say(args.quiet, f"round {row['round']:4d}  acc {row['test_acc']:.4f}  loss {row['train_loss']:.4f}")

    result = run(cfg, threads=threads, data=data, initial=initial, checkpoint_dir=ckpt_dir,
                 checkpoint_every=args.checkpoint_every, progress=progress)
    if initial is not None and result.pretrained_acc is None:
        result.summary["initial_acc"] = top1_accuracy(initial, data.test)
    csv_path, json_path = write_outputs(result, args.out)
    print(f"final accuracy {result.final_acc:.4f}; wrote {csv_path} and {json_path}")
    return EXIT_OK


def cmd_ablation(cfg, args, threads) -> int:
    seeds = _parse_seeds(args.seeds)
    rows = ablation(cfg, seeds, threads=threads,
                    progress=lambda v, s, a: _say(args.quiet, f"{v:12s} seed {s}: {a:.4f}"))
    args.out.mkdir(parents=True, exist_ok=True)
    with (args.out / "ablation.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "seed", "final_acc"])
        for r in rows:
            for s, a in zip(r["seeds"], r["final_acc"]):
                w.writerow([r["variant"], s, format(a, ".17g")])
    (args.out / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n")
    for r in rows:
        print(f"{r['variant']:12s} {r['mean_acc']:.4f}")
    return EXIT_OK


def cmd_grid(cfg, args, threads) -> int:
    rows = grid(cfg, seeds=_parse_seeds(args.seeds), threads=threads)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "grid.json").write_text(json.dumps(rows, indent=2) + "\n")
    for r in rows:
        print(f"topk {r['topk']:3d}  lambda {r['lambda']:<4}  {r['mean_acc']:.4f}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        threads = thread_count(args)
        if args.write_config:
            cfg.save(args.write_config)
            return EXIT_OK
        if args.pretrain_only:
            return cmd_pretrain(cfg, args)
        if args.preset == "ablation":
            return cmd_ablation(cfg, args, threads)
        if args.preset == "grid":
            return cmd_grid(cfg, args, threads)
        return cmd_run(cfg, args, threads)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DatasetMissing as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except PretrainFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PRETRAIN


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
