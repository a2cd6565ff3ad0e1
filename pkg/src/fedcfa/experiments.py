"""Experiment assembly: data, pretraining, the round loop and its CSV log."""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .config import ExperimentConfig
from .data import (
    LabeledDataset,
    PartitionPlan,
    dirichlet_partition,
    filter_classes,
    find_mnist,
    iid_partition,
    load_idx,
    make_simpson_colored,
    synthetic_digits,
    synthetic_mixture,
    train_test_split,
)
from .federation import FedConfig, FederationState, run_round
from .metrics import top1_accuracy
from .models import SplitModel, mlp_specs
from .nn import backward, sgd_step, softmax_cross_entropy

CSV_HEADER = ("round", "algo", "seed", "test_acc", "train_loss", "loss_cls", "loss_pos", "loss_neg", "loss_corr", "wall_ms")

# full-scale reference settings next to the desk-scale values actually used
FULL_SCALE_SETTINGS = {"clients": 60, "rounds": 500, "batch_size": 128, "lr": 0.01, "epochs": 1, "pretrain_target": 0.95}


class DatasetMissing(FileNotFoundError):
    pass


class PretrainFailed(RuntimeError):
    def __init__(self, best: float, target: float):
        super().__init__(f"pretraining reached {best:.4f}, below target {target:.4f}")
        self.best = best
        self.target = target


@dataclass
class ExperimentData:
    clients: list[LabeledDataset]
    test: LabeledDataset
    pretrain_set: LabeledDataset
    plan: PartitionPlan | None = None


def build_data(cfg: ExperimentConfig) -> ExperimentData:
    if cfg.dataset == "mnist":
        found = find_mnist(cfg.data_dir or ".")
        if found is None:
            raise DatasetMissing(f"no MNIST IDX files under {cfg.data_dir!r}")
        base = load_idx(*found)
        if cfg.samples and cfg.samples < len(base):
            base = base.subset(np.random.default_rng(cfg.data_seed).permutation(len(base))[: cfg.samples])
    else:
        base = None

    if cfg.partition == "simpson":
        if base is None:
            base = synthetic_digits(cfg.samples, cfg.data_seed, side=cfg.image_side, ambiguity=cfg.ambiguity)
        split = make_simpson_colored(filter_classes(base, (1, 7)), 5, cfg.data_seed, test_fraction=cfg.test_fraction)
        return ExperimentData(split.clients, split.test, split.gray_train)

    if base is None:
        base = synthetic_mixture(cfg.samples, classes=10, dim=cfg.image_side ** 2 // 2, seed=cfg.data_seed, spread=2.5)
    train, test = train_test_split(base, cfg.test_fraction, cfg.data_seed)
    if cfg.partition == "dirichlet":
        plan = dirichlet_partition(train, cfg.clients, cfg.alpha, cfg.data_seed)
    else:
        plan = iid_partition(train, cfg.clients, cfg.data_seed)
    return ExperimentData(plan.apply(train), test, train, plan)


def make_model(cfg: ExperimentConfig, in_dim: int, classes: int) -> SplitModel:
    return SplitModel(mlp_specs([in_dim, *cfg.widths], classes, cfg.activation), hook=cfg.hook, seed=cfg.seed)


def pretrain(cfg: ExperimentConfig, model: SplitModel, train: LabeledDataset, test: LabeledDataset) -> float:
    """Centralised SGD until test accuracy reaches the target.

    Returns the reached accuracy; raises PretrainFailed with the best value
    when the epoch budget runs out.
    """
    acc = top1_accuracy(model, test)
    best = acc
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7919]))
    for _ in range(cfg.pretrain_max_epochs):
        if acc >= cfg.pretrain_target:
            return acc
        perm = rng.permutation(len(train))
        for start in range(0, len(train), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            loss = softmax_cross_entropy(model(train.xs[idx]), train.ys[idx])
            backward(loss, model.params)
            sgd_step(model.params, cfg.pretrain_lr)
        acc = top1_accuracy(model, test)
        best = max(best, acc)
    if acc >= cfg.pretrain_target:
        return acc
    raise PretrainFailed(best, cfg.pretrain_target)


@dataclass
class RunResult:
    rows: list[dict]
    pretrained_acc: float | None
    final_acc: float
    summary: dict = field(default_factory=dict)


def _fmt(v) -> str:
    return format(v, ".17g") if isinstance(v, float) else str(v)


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow([_fmt(r[k]) for k in CSV_HEADER])
    return buf.getvalue()


def run(cfg: ExperimentConfig, threads: int = 1, data: ExperimentData | None = None,
        initial: SplitModel | None = None, checkpoint_dir=None, checkpoint_every: int = 0, progress=None) -> RunResult:
    cfg.validate()
    data = data or build_data(cfg)
    pretrained_acc = None
    if initial is not None:
        model = initial.clone()
    else:
        model, pretrained_acc = pretrained_start(cfg, data)
    if pretrained_acc is None and cfg.pretrain:
        pretrained_acc = top1_accuracy(model, data.test)
    fc = FedConfig.from_experiment(cfg, threads=threads)
    state = FederationState.create(model, data.clients, seed=cfg.seed)
    rows = []
    for _ in range(cfg.rounds):
        t0 = time.perf_counter()
        state, rep = run_round(state, fc)
        acc = top1_accuracy(state.server_model(), data.test)
        wall = (time.perf_counter() - t0) * 1000.0 if cfg.record_wall_time else 0.0
        rows.append({
            "round": rep.round,
            "algo": cfg.algo,
            "seed": cfg.seed,
            "test_acc": acc,
            "train_loss": rep.losses["total"],
            "loss_cls": rep.losses["cls"],
            "loss_pos": rep.losses["pos"],
            "loss_neg": rep.losses["neg"],
            "loss_corr": rep.losses["corr"],
            "wall_ms": round(wall, 3),
        })
        if checkpoint_dir is not None and checkpoint_every and state.round % checkpoint_every == 0:
            state.server_model().save(Path(checkpoint_dir) / f"round_{state.round:05d}.fcfa")
        if progress is not None:
            progress(rows[-1])
    final = rows[-1]["test_acc"] if rows else top1_accuracy(state.server_model(), data.test)
    summary = {
        "algo": cfg.algo,
        "seed": cfg.seed,
        "rounds": cfg.rounds,
        "final_test_acc": final,
        "pretrained_acc": pretrained_acc,
        "kernel_backend": _kernels.backend(),
        "full_scale_settings": FULL_SCALE_SETTINGS,
        "desk_settings": {k: getattr(cfg, k) for k in ("clients", "rounds", "batch_size", "lr", "epochs", "pretrain_target")},
        "config": asdict(cfg),
    }
    return RunResult(rows, pretrained_acc, final, summary)


def write_outputs(result: RunResult, out_dir, stem: str = "rounds") -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{stem}.csv"
    json_path = out / f"{stem}_summary.json"
    csv_path.write_text(rows_to_csv(result.rows))
    json_path.write_text(json.dumps(result.summary, indent=2, sort_keys=True) + "\n")
    return csv_path, json_path


ABLATION_VARIANTS = {
    "cls": dict(lambda_pos=0.0, lambda_neg=0.0),
    "cls+pos": dict(lambda_neg=0.0),
    "cls+neg": dict(lambda_pos=0.0),
    "cls+pos+neg": dict(),
}


def pretrained_start(cfg: ExperimentConfig, data: ExperimentData) -> tuple[SplitModel, float | None]:
    """Initial model for a run: freshly initialised, then pretrained if the config asks."""
    model = make_model(cfg, data.test.in_dim, data.test.num_classes)
    acc = pretrain(cfg, model, data.pretrain_set, data.test) if cfg.pretrain else None
    return model, acc


def ablation(cfg: ExperimentConfig, seeds=(1, 2, 3), threads: int = 1, progress=None) -> list[dict]:
    """Four counterfactual-module variants of FedCFA on identical seeds.

    Every variant of a seed starts from the same (pretrained) model.
    """
    data = build_data(cfg)
    accs = {name: [] for name in ABLATION_VARIANTS}
    for s in seeds:
        base = cfg.replace(algo="fedcfa", seed=s)
        start, _ = pretrained_start(base, data)
        for name, change in ABLATION_VARIANTS.items():
            res = run(base.replace(**change), threads=threads, data=data, initial=start)
            accs[name].append(res.final_acc)
            if progress is not None:
                progress(name, s, res.final_acc)
    return [{"variant": name, "seeds": list(seeds), "final_acc": a, "mean_acc": float(np.mean(a))}
            for name, a in accs.items()]


def grid(cfg: ExperimentConfig, topks=(8, 16, 24, 32), lambdas=(0.1, 1.0, 2.0), seeds=(1,), threads: int = 1) -> list[dict]:
    """Small top-k x balanced-lambda sweep for FedCFA."""
    fd = cfg.widths[cfg.hook - 1]
    rows = []
    for k in topks:
        if k > fd:
            continue
        for lam in lambdas:
            accs = [run(cfg.replace(algo="fedcfa", topk=k, lambda_pos=lam, lambda_neg=lam, seed=s), threads=threads).final_acc
                    for s in seeds]
            rows.append({"topk": k, "lambda": lam, "seeds": list(seeds), "mean_acc": float(np.mean(accs))})
    return rows
