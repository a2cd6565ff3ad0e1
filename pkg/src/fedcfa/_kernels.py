"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import time. Set ``FEDCFA_NUMBA=0`` to force
the numpy implementations (also used automatically when numba is missing).
The compiled kernels are also importable under ``*_numpy`` and ``*_numba``
names so tests and benchmarks can compare them directly.
"""
from __future__ import annotations

import os

import numpy as np

LOG_FLOOR = 1e-12
VAR_FLOOR = 1e-12

try:
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def _njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap


USE_NUMBA = HAVE_NUMBA and os.environ.get("FEDCFA_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"


# --------------------------------------------------------------------------
# softmax cross-entropy with soft targets, fused forward + backward
# --------------------------------------------------------------------------

def softmax_xent_numpy(logits, targets):
    """Return ``(mean loss, d loss / d logits, probabilities)``."""
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    probs = ex / ex.sum(axis=1, keepdims=True)
    active = probs >= LOG_FLOOR
    logp = np.log(np.maximum(probs, LOG_FLOOR))
    loss = -(targets * logp).sum() / n
    live_t = np.where(active, targets, 0.0)
    dlogits = (probs * live_t.sum(axis=1, keepdims=True) - live_t) / n
    return float(loss), dlogits, probs


@_njit(cache=True, nogil=True)
def _softmax_xent_nb(logits, targets):
    n, c = logits.shape
    probs = np.empty((n, c))
    dlogits = np.empty((n, c))
    loss = 0.0
    for i in range(n):
        m = logits[i, 0]
        for k in range(1, c):
            if logits[i, k] > m:
                m = logits[i, k]
        s = 0.0
        for k in range(c):
            e = np.exp(logits[i, k] - m)
            probs[i, k] = e
            s += e
        live_sum = 0.0
        for k in range(c):
            p = probs[i, k] / s
            probs[i, k] = p
            if p >= LOG_FLOOR:
                loss -= targets[i, k] * np.log(p)
                live_sum += targets[i, k]
            else:
                loss -= targets[i, k] * np.log(LOG_FLOOR)
        for k in range(c):
            p = probs[i, k]
            t = targets[i, k] if p >= LOG_FLOOR else 0.0
            dlogits[i, k] = (p * live_sum - t) / n
    return loss / n, dlogits, probs


def softmax_xent_numba(logits, targets):
    loss, dlogits, probs = _softmax_xent_nb(
        np.ascontiguousarray(logits, dtype=np.float64), np.ascontiguousarray(targets, dtype=np.float64)
    )
    return float(loss), dlogits, probs


# --------------------------------------------------------------------------
# factor decorrelation: mean |pearson| over column pairs, forward + backward
# --------------------------------------------------------------------------

def fdc_numpy(F):
    """Return ``(loss, d loss / d F)`` for a ``[batch, d]`` factor matrix."""
    n, d = F.shape
    pairs = d * (d - 1) / 2.0
    C = F - F.mean(axis=0)
    var = (C * C).mean(axis=0)
    live = var >= VAR_FLOOR
    std = np.sqrt(np.where(live, var, 1.0))
    Z = np.where(live, C / std, 0.0)
    R = Z.T @ Z / n
    iu = np.triu_indices(d, 1)
    loss = np.abs(R[iu]).sum() / pairs
    G = np.sign(R) / (2.0 * pairs)
    np.fill_diagonal(G, 0.0)
    dZ = 2.0 * (Z @ G) / n
    dC = (dZ - Z * (dZ * Z).mean(axis=0)) / std
    dC[:, ~live] = 0.0
    dF = dC - dC.mean(axis=0)
    return float(loss), dF


@_njit(cache=True, nogil=True)
def _fdc_nb(FT):
    # works on the transposed [d, batch] matrix so every inner loop is contiguous
    d, n = FT.shape
    pairs = d * (d - 1) / 2.0
    Z = np.zeros((d, n))
    std = np.ones(d)
    live = np.zeros(d, dtype=np.bool_)
    for j in range(d):
        mu = 0.0
        for i in range(n):
            mu += FT[j, i]
        mu /= n
        v = 0.0
        for i in range(n):
            c = FT[j, i] - mu
            Z[j, i] = c
            v += c * c
        v /= n
        if v >= VAR_FLOOR:
            live[j] = True
            std[j] = np.sqrt(v)
            for i in range(n):
                Z[j, i] /= std[j]
        else:
            for i in range(n):
                Z[j, i] = 0.0
    loss = 0.0
    dZ = np.zeros((d, n))
    w = 1.0 / (pairs * n)
    for j in range(d):
        if not live[j]:
            continue
        zj = Z[j]
        for k in range(j + 1, d):
            if not live[k]:
                continue
            zk = Z[k]
            r = 0.0
            for i in range(n):
                r += zj[i] * zk[i]
            r /= n
            if r > 0.0:
                loss += r
                s = w
            elif r < 0.0:
                loss -= r
                s = -w
            else:
                continue
            gj = dZ[j]
            gk = dZ[k]
            for i in range(n):
                gj[i] += s * zk[i]
                gk[i] += s * zj[i]
    dF = np.zeros((d, n))
    for j in range(d):
        if not live[j]:
            continue
        proj = 0.0
        for i in range(n):
            proj += dZ[j, i] * Z[j, i]
        proj /= n
        m = 0.0
        for i in range(n):
            g = (dZ[j, i] - Z[j, i] * proj) / std[j]
            dF[j, i] = g
            m += g
        m /= n
        for i in range(n):
            dF[j, i] -= m
    return loss / pairs, dF


def fdc_numba(F):
    loss, dFT = _fdc_nb(np.ascontiguousarray(np.asarray(F, dtype=np.float64).T))
    return float(loss), np.ascontiguousarray(dFT.T)


# --------------------------------------------------------------------------
# per-column 1-D empirical Wasserstein distance between equal-size samples
# --------------------------------------------------------------------------

def w1_columns_numpy(a, b):
    return np.abs(np.sort(a, axis=0) - np.sort(b, axis=0)).mean(axis=0)


# No compiled variant: numba's generic sort lost to numpy's column sort by
# about 5x at every size tried, and this only runs in evaluation.
w1_columns = w1_columns_numpy

if USE_NUMBA:
    softmax_xent = softmax_xent_numba
    fdc = fdc_numba
else:
    softmax_xent = softmax_xent_numpy
    fdc = fdc_numpy
