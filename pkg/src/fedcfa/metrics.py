"""Evaluation and oracle instruments."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels


def top1_accuracy(model, ds) -> float:
    """Fraction of rows whose argmax logit matches the argmax label."""
    if len(ds) == 0:
        raise ValueError("empty dataset")
    pred = model.predict_logits(ds.xs).argmax(axis=1)
    return float((pred == ds.ys.argmax(axis=1)).mean())


def wasserstein_1d(a, b) -> float:
    """Empirical W1 between equal-size samples: mean |a_(i) - b_(i)| after sorting."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size != b.size or a.size == 0:
        raise ValueError(f"wasserstein_1d needs equal non-empty samples, got {a.size} and {b.size}")
    return float(np.abs(np.sort(a) - np.sort(b)).mean())


@dataclass
class AlignmentReport:
    d_before: np.ndarray
    d_after: np.ndarray

    @property
    def mean_before(self) -> float:
        return float(self.d_before.mean())

    @property
    def mean_after(self) -> float:
        return float(self.d_after.mean())

    def on(self, idx) -> tuple[float, float]:
        """Mean distances restricted to columns ``idx``."""
        idx = np.asarray(idx, dtype=np.int64)
        return float(self.d_before[idx].mean()), float(self.d_after[idx].mean())


def factor_alignment_report(F_before, F_after, F_global) -> AlignmentReport:
    """Per-factor W1 of each matrix column to the matching global-average column."""
    F_before, F_after, F_global = (np.asarray(getattr(m, "data", m), dtype=np.float64) for m in (F_before, F_after, F_global))
    if not (F_before.shape == F_after.shape == F_global.shape) or F_before.ndim != 2:
        raise ValueError("factor matrices must share one [batch, factors] shape")
    return AlignmentReport(_kernels.w1_columns(F_before, F_global), _kernels.w1_columns(F_after, F_global))


def pearson_bruteforce(F) -> float:
    """Mean |Pearson r| over column pairs, pair by pair, for cross-checking."""
    F = np.asarray(getattr(F, "data", F), dtype=np.float64)
    n, d = F.shape
    if n < 3:
        return 0.0
    total = 0.0
    pairs = 0
    for j in range(d):
        a = F[:, j]
        for k in range(j + 1, d):
            b = F[:, k]
            ma, mb = a.sum() / n, b.sum() / n
            cov = float(np.dot(a - ma, b - mb)) / n
            va = float(np.dot(a - ma, a - ma)) / n
            vb = float(np.dot(b - mb, b - mb)) / n
            if va >= 1e-12 and vb >= 1e-12:
                total += abs(cov / math.sqrt(va * vb))
            pairs += 1
    return total / pairs


def export_factors(model, ds, path, client_ids=None) -> None:
    """CSV with header ``client,label,f0..f{d-1}``; reals at 17 significant digits."""
    if len(ds) == 0:
        raise ValueError("empty dataset")
    F = model.encode(ds.xs).data
    labels = ds.ys.argmax(axis=1)
    clients = np.zeros(len(ds), dtype=np.int64) if client_ids is None else np.asarray(client_ids)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["client", "label"] + [f"f{j}" for j in range(F.shape[1])])
        for c, y, row in zip(clients, labels, F):
            w.writerow([int(c), int(y)] + [format(v, ".17g") for v in row])


def read_factors(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    clients = np.array([int(r[0]) for r in rows])
    labels = np.array([int(r[1]) for r in rows])
    F = np.array([[float(v) for v in r[2:]] for r in rows])
    return clients, labels, F
