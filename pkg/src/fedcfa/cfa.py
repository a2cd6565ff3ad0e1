"""Counterfactual factor replacement and factor-decorrelation losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .nn import (
    ShapeError,
    Tensor,
    check_soft_targets,
    custom_op,
    grad_wrt_activation,
    replace_columns,
    softmax_cross_entropy,
)

FDC_MIN_BATCH = 3
VAR_FLOOR = _kernels.VAR_FLOOR


class FdcInactive(ValueError):
    """Raised when a batch is too small (< 3 rows) for correlation terms."""


@dataclass
class CfaConfig:
    topk: int = 24
    lambda_pos: float = 1.0
    lambda_neg: float = 1.0
    lambda_corr: float = 0.1

    def validate(self, factor_dim: int | None = None) -> None:
        if self.topk < 0 or (factor_dim is not None and self.topk > factor_dim):
            raise ValueError(f"topk={self.topk} outside [0, {factor_dim}]")
        for name in ("lambda_pos", "lambda_neg", "lambda_corr"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def select_topk_factors(grad_mag, topk: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the ``topk`` smallest and largest magnitudes.

    Ties go to the lower index. Both results are sorted ascending.
    """
    g = np.asarray(grad_mag, dtype=np.float64).reshape(-1)
    if not 0 <= topk <= g.size:
        raise ValueError(f"topk={topk} outside [0, {g.size}]")
    if (g < 0).any():
        raise ValueError("gradient magnitudes must be non-negative")
    low = np.argsort(g, kind="stable")[:topk]
    high = np.argsort(-g, kind="stable")[:topk]
    return np.sort(low), np.sort(high)


def factor_mask(idx, factor_dim: int) -> np.ndarray:
    """1 = keep the local factor, 0 = take the global one."""
    mask = np.ones(factor_dim)
    mask[np.asarray(idx, dtype=np.int64)] = 0.0
    return mask


def factor_gradient_magnitudes(model, X, Y) -> np.ndarray:
    """Batch mean of |d l_i / d F_i| for the classification loss.

    ``l_i`` is the per-sample loss, so the result does not depend on batch
    size. Runs its own forward pass; parameter grads are untouched.
    """
    F = model.encode(Tensor(X))
    loss = softmax_cross_entropy(model.decode_classify(F), Y)
    g = grad_wrt_activation(loss, F) * F.shape[0]
    return np.abs(g).mean(axis=0)


def make_positive(F: Tensor, F_global: Tensor, low_idx) -> Tensor:
    return replace_columns(F, F_global, low_idx)


def make_negative(F: Tensor, F_global: Tensor, high_idx) -> Tensor:
    return replace_columns(F, F_global, high_idx)


def counterfactual_label(Y, Y_global, topk: int, factor_dim: int) -> np.ndarray:
    Y = np.asarray(Y, dtype=np.float64)
    Y_global = np.asarray(Y_global, dtype=np.float64)
    if Y.shape != Y_global.shape:
        raise ShapeError(f"label shapes differ: {Y.shape} vs {Y_global.shape}")
    check_soft_targets(Y)
    check_soft_targets(Y_global)
    rho = topk / factor_dim
    return rho * Y_global + (1.0 - rho) * Y


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size != b.size:
        raise ShapeError("pearson: length mismatch")
    if a.size < FDC_MIN_BATCH:
        raise FdcInactive(f"batch of {a.size} is below {FDC_MIN_BATCH}")
    da, db = a - a.mean(), b - b.mean()
    va, vb = (da * da).mean(), (db * db).mean()
    if va < VAR_FLOOR or vb < VAR_FLOOR:
        return 0.0
    r = (da * db).mean() / np.sqrt(va * vb)
    return float(min(1.0, max(-1.0, r)))


def fdc_loss(F: Tensor) -> Tensor:
    """Mean absolute pairwise Pearson correlation between factor columns.

    Returns a constant zero when the batch has fewer than 3 rows.
    """
    if F.data.ndim != 2:
        raise ShapeError(f"fdc_loss expects [batch, factors], got {F.shape}")
    n, d = F.shape
    if d < 2:
        raise ValueError("fdc_loss needs at least 2 factors")
    if n < FDC_MIN_BATCH:
        return Tensor(0.0)
    loss, dF = _kernels.fdc(F.data)

    def bw(g, needed):
        return (dF * float(g),)

    return custom_op((F,), np.array(loss), bw, "fdc")


def total_loss(L_cls: Tensor, L_pos, L_neg, L_corr, cfg: CfaConfig) -> Tensor:
    """``L_cls + lambda_neg L_neg + lambda_pos L_pos + lambda_corr L_corr``.

    Terms whose coefficient is zero, or which are ``None``, are left out of
    the graph entirely.
    """
    total = L_cls
    for lam, term in ((cfg.lambda_neg, L_neg), (cfg.lambda_pos, L_pos), (cfg.lambda_corr, L_corr)):
        if lam == 0 or term is None:
            continue
        term = term if isinstance(term, Tensor) else Tensor(term)
        total = total + term * lam
    return total


@dataclass
class CounterfactualBatch:
    F_pos: Tensor
    F_neg: Tensor
    Y_neg: np.ndarray
    low_idx: np.ndarray
    high_idx: np.ndarray
    F_global: Tensor


def counterfactual_batch(model, X, Y, F: Tensor, X_global, Y_global, topk: int) -> CounterfactualBatch:
    """Build positive/negative factor batches against global-average rows.

    ``X_global``/``Y_global`` must have the same row count as ``X``. One
    mask per batch, chosen from batch-mean gradient magnitudes.
    """
    mags = factor_gradient_magnitudes(model, X, Y)
    low, high = select_topk_factors(mags, topk)
    F_global = model.encode(Tensor(X_global))
    F_pos = make_positive(F, F_global, low)
    F_neg = make_negative(F, F_global, high)
    Y_neg = counterfactual_label(Y, Y_global, topk, model.factor_dim)
    return CounterfactualBatch(F_pos, F_neg, Y_neg, low, high, F_global)


def fedcfa_losses(model, X, Y, cfg: CfaConfig, global_batch=None) -> dict[str, Tensor | None]:
    """Forward pass for one local batch: ``cls``, ``corr``, ``pos``, ``neg``, ``total``.

    ``global_batch`` is ``(X_global, Y_global)`` or ``None`` (no global
    data yet); without it ``pos``/``neg`` are ``None``.
    """
    X = np.asarray(X, dtype=np.float64)
    F = model.encode(Tensor(X))
    L_cls = softmax_cross_entropy(model.decode_classify(F), Y)
    L_corr = fdc_loss(F) if cfg.lambda_corr != 0 else None
    L_pos = L_neg = None
    if global_batch is not None and (cfg.lambda_pos != 0 or cfg.lambda_neg != 0):
        Xg, Yg = global_batch
        cf = counterfactual_batch(model, X, Y, F, Xg, Yg, cfg.topk)
        if cfg.lambda_pos != 0:
            L_pos = softmax_cross_entropy(model.decode_classify(cf.F_pos), Y)
        if cfg.lambda_neg != 0:
            L_neg = softmax_cross_entropy(model.decode_classify(cf.F_neg), cf.Y_neg)
    return {
        "cls": L_cls,
        "corr": L_corr,
        "pos": L_pos,
        "neg": L_neg,
        "total": total_loss(L_cls, L_pos, L_neg, L_corr, cfg),
    }
