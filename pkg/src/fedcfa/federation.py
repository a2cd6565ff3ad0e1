"""Round orchestration: client sampling, local updates, aggregation and the
global-average-data exchange.

Every selected client gets RNG streams derived from ``(seed, round,
client_id)`` only, so results do not depend on how many worker threads run
the local updates.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .cfa import CfaConfig, fedcfa_losses
from .data import (
    GlobalAverageDataset,
    LabeledDataset,
    LocalAverage,
    global_average_aggregate,
    local_average,
    sample_global_batch,
)
from .models import SplitModel
from .nn import backward, sgd_step, softmax_cross_entropy

LOSS_KEYS = ("cls", "pos", "neg", "corr", "total")


@dataclass
class FedConfig:
    algo: str = "fedcfa"
    lr: float = 0.01
    epochs: int = 1
    batch_size: int = 32
    mu: float = 0.01
    lam_mix: float = 0.1
    cfa: CfaConfig = field(default_factory=CfaConfig)
    global_avg_size: int = 64
    clients_per_round: int = 0
    use_global_avg: bool = True
    threads: int = 1

    @classmethod
    def from_experiment(cls, cfg, threads: int = 1) -> "FedConfig":
        return cls(
            algo=cfg.algo,
            lr=cfg.lr,
            epochs=cfg.epochs,
            batch_size=cfg.batch_size,
            mu=cfg.mu,
            lam_mix=cfg.lam_mix,
            cfa=CfaConfig(cfg.topk, cfg.lambda_pos, cfg.lambda_neg, cfg.lambda_corr),
            global_avg_size=cfg.global_avg_size,
            clients_per_round=cfg.clients_per_round,
            use_global_avg=cfg.use_global_avg,
            threads=threads,
        )


@dataclass
class ClientStreams:
    order: np.random.Generator
    augment: np.random.Generator
    average: np.random.Generator

    @classmethod
    def derive(cls, seed: int, round_idx: int, client_id: int) -> "ClientStreams":
        ss = np.random.SeedSequence([seed, round_idx, 0, client_id])
        return cls(*(np.random.default_rng(s) for s in ss.spawn(3)))


@dataclass
class ClientReport:
    client_id: int
    updated_weights: np.ndarray
    n_k: int
    local_avg: LocalAverage | None
    loss_components: list[dict[str, float]]

    @property
    def last_losses(self) -> dict[str, float]:
        if self.loss_components:
            return self.loss_components[-1]
        return {k: 0.0 for k in LOSS_KEYS}


@dataclass
class RoundReport:
    round: int
    selected: list[int]
    losses: dict[str, float]
    clients: list[ClientReport]


@dataclass
class FederationState:
    model: SplitModel
    server_weights: np.ndarray
    clients: list[LabeledDataset]
    global_avg: GlobalAverageDataset = field(default_factory=GlobalAverageDataset.absent)
    round: int = 0
    seed: int = 0

    @classmethod
    def create(cls, model: SplitModel, clients: list[LabeledDataset], seed: int = 0) -> "FederationState":
        if not clients:
            raise ValueError("federation needs at least one client")
        return cls(model, model.flatten_params(), list(clients), GlobalAverageDataset.absent(), 0, seed)

    @property
    def client_sizes(self) -> list[int]:
        return [len(c) for c in self.clients]

    def server_model(self) -> SplitModel:
        m = self.model.clone()
        m.unflatten_params(self.server_weights)
        return m


# --------------------------------------------------------------------------
# aggregation
# --------------------------------------------------------------------------

def aggregation_weights(n_ks) -> np.ndarray:
    n = np.asarray(n_ks, dtype=np.float64)
    if n.size == 0 or (n <= 0).any():
        raise ValueError("client sizes must be positive")
    return n / n.sum()


def aggregate_weighted(weights, n_ks, client_ids=None) -> np.ndarray:
    """Mean of client weight vectors weighted by ``n_k / sum(n)``.

    Summation runs in ascending client-id order (input order when no ids
    are given).
    """
    vecs = [np.asarray(getattr(w, "updated_weights", w), dtype=np.float64) for w in weights]
    if not vecs:
        raise ValueError("nothing to aggregate")
    if len(vecs) != len(n_ks):
        raise ValueError("one size per weight vector required")
    length = vecs[0].shape
    if any(v.shape != length for v in vecs):
        raise ValueError("client weight vectors differ in length")
    order = range(len(vecs)) if client_ids is None else np.argsort(np.asarray(client_ids), kind="stable")
    coef = aggregation_weights(n_ks)
    acc = np.zeros(length)
    for i in order:
        acc = acc + coef[i] * vecs[i]
    return acc


# --------------------------------------------------------------------------
# local updates
# --------------------------------------------------------------------------

BatchLoss = Callable[[SplitModel, np.ndarray, np.ndarray], dict]


def _local_sgd(model: SplitModel, ds: LabeledDataset, fc: FedConfig, streams: ClientStreams,
               batch_loss: BatchLoss, grad_hook=None) -> list[dict[str, float]]:
    history = []
    n = len(ds)
    for _ in range(fc.epochs):
        perm = streams.order.permutation(n)
        sums = dict.fromkeys(LOSS_KEYS, 0.0)
        batches = 0
        for start in range(0, n, fc.batch_size):
            idx = perm[start:start + fc.batch_size]
            losses = batch_loss(model, ds.xs[idx], ds.ys[idx])
            backward(losses["total"], model.params)
            if grad_hook is not None:
                grad_hook(model)
            sgd_step(model.params, fc.lr)
            for k in LOSS_KEYS:
                v = losses.get(k)
                if v is not None:
                    sums[k] += v.item()
            batches += 1
        history.append({k: v / max(batches, 1) for k, v in sums.items()})
    return history


def _finish(client_id, model, ds, fc, streams, history) -> ClientReport:
    avg = None
    if len(ds) >= fc.global_avg_size:
        avg = local_average(ds, fc.global_avg_size, streams.average, client_id=client_id)
    return ClientReport(client_id, model.flatten_params(), len(ds), avg, history)


def _cls_only(model, X, Y):
    L = softmax_cross_entropy(model(X), Y)
    return {"cls": L, "total": L}


def client_update_fedavg(model: SplitModel, weights, dataset: LabeledDataset, fc: FedConfig,
                         streams: ClientStreams, client_id: int = 0) -> ClientReport:
    model = model.clone()
    model.unflatten_params(weights)
    history = _local_sgd(model, dataset, fc, streams, _cls_only)
    return _finish(client_id, model, dataset, fc, streams, history)


def client_update_fedprox(model: SplitModel, weights, dataset: LabeledDataset, fc: FedConfig,
                          streams: ClientStreams, client_id: int = 0) -> ClientReport:
    """FedAvg plus the proximal gradient ``mu (w - w_global)`` at every step."""
    if fc.mu < 0:
        raise ValueError("mu must be non-negative")
    model = model.clone()
    model.unflatten_params(weights)
    anchors = [p.data.copy() for p in model.params]

    def prox(m):
        for p, a in zip(m.params, anchors):
            p.grad = p.grad + fc.mu * (p.data - a)

    history = _local_sgd(model, dataset, fc, streams, _cls_only, prox if fc.mu != 0 else None)
    return _finish(client_id, model, dataset, fc, streams, history)


def client_update_fedmix(model: SplitModel, weights, dataset: LabeledDataset, global_avg: GlobalAverageDataset,
                         fc: FedConfig, streams: ClientStreams, client_id: int = 0) -> ClientReport:
    """Mixup of each batch with sampled global-average rows."""
    lam = fc.lam_mix
    if not 0 <= lam <= 1:
        raise ValueError("lam_mix must lie in [0, 1]")
    model = model.clone()
    model.unflatten_params(weights)
    if lam == 0 or not global_avg.present:
        batch_loss = _cls_only
    else:
        def batch_loss(m, X, Y):
            Xg, Yg = sample_global_batch(global_avg, len(X), streams.augment)
            L = softmax_cross_entropy(m((1.0 - lam) * X + lam * Xg), (1.0 - lam) * Y + lam * Yg)
            return {"cls": L, "total": L}
    history = _local_sgd(model, dataset, fc, streams, batch_loss)
    return _finish(client_id, model, dataset, fc, streams, history)


def client_update_fedcfa(model: SplitModel, weights, dataset: LabeledDataset, global_avg: GlobalAverageDataset,
                         fc: FedConfig, streams: ClientStreams, client_id: int = 0) -> ClientReport:
    """Classification + FDC loss, plus counterfactual losses once global data exists.

    Positive and negative samples share one global-average draw per batch.
    """
    model = model.clone()
    model.unflatten_params(weights)
    fc.cfa.validate(model.factor_dim)

    def batch_loss(m, X, Y):
        gb = sample_global_batch(global_avg, len(X), streams.augment) if global_avg.present else None
        return fedcfa_losses(m, X, Y, fc.cfa, gb)

    history = _local_sgd(model, dataset, fc, streams, batch_loss)
    return _finish(client_id, model, dataset, fc, streams, history)


def client_update(state: FederationState, client_id: int, fc: FedConfig) -> ClientReport:
    streams = ClientStreams.derive(state.seed, state.round, client_id)
    ds = state.clients[client_id]
    w = state.server_weights
    if fc.algo == "fedavg":
        return client_update_fedavg(state.model, w, ds, fc, streams, client_id)
    if fc.algo == "fedprox":
        return client_update_fedprox(state.model, w, ds, fc, streams, client_id)
    if fc.algo == "fedmix":
        return client_update_fedmix(state.model, w, ds, state.global_avg, fc, streams, client_id)
    if fc.algo == "fedcfa":
        return client_update_fedcfa(state.model, w, ds, state.global_avg, fc, streams, client_id)
    raise ValueError(f"unknown algorithm {fc.algo!r}")


def select_clients(seed: int, round_idx: int, K: int, m: int) -> list[int]:
    if m <= 0 or m >= K:
        return list(range(K))
    rng = np.random.default_rng(np.random.SeedSequence([seed, round_idx, 1]))
    return sorted(int(i) for i in rng.choice(K, size=m, replace=False))


def run_round(state: FederationState, fc: FedConfig, update_fn=client_update) -> tuple[FederationState, RoundReport]:
    """Broadcast, local updates for the sampled clients, aggregation.

    ``state`` is updated in place and also returned.
    """
    if not state.clients:
        raise ValueError("no clients")
    if state.server_weights.size != state.model.num_params:
        raise ValueError("server weights do not match the model architecture")
    selected = select_clients(state.seed, state.round, len(state.clients), fc.clients_per_round)
    if fc.threads > 1 and len(selected) > 1:
        with ThreadPoolExecutor(max_workers=fc.threads) as pool:
            reports = list(pool.map(lambda k: update_fn(state, k, fc), selected))
    else:
        reports = [update_fn(state, k, fc) for k in selected]
    reports.sort(key=lambda r: r.client_id)
    for r in reports:
        if r.updated_weights.size != state.model.num_params:
            raise ValueError(f"client {r.client_id} returned weights of the wrong length")
    n_ks = [r.n_k for r in reports]
    state.server_weights = aggregate_weighted(reports, n_ks, [r.client_id for r in reports])
    locals_ = [r.local_avg for r in reports if r.local_avg is not None]
    if fc.use_global_avg and locals_:
        state.global_avg = global_average_aggregate(locals_)
    coef = aggregation_weights(n_ks)
    losses = {k: float(sum(c * r.last_losses[k] for c, r in zip(coef, reports))) for k in LOSS_KEYS}
    report = RoundReport(state.round, selected, losses, reports)
    state.round += 1
    return state, report
