"""Numpy kernels for activations and losses.

These are the single source of truth for the forward math; the graph ops in
``autodiff`` call them and add the backward rules.
"""

from __future__ import annotations

import numpy as np

from ..errors import DataError, ShapeError

# self-normalizing ELU constants (fixed-point of mean 0 / variance 1)
SELU_ALPHA = 1.6732632423543772
SELU_SCALE = 1.0507009873554805

PROB_FLOOR = 1e-12


def selu(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0, SELU_SCALE * x, SELU_SCALE * SELU_ALPHA * np.expm1(x))


def selu_grad(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0, SELU_SCALE, SELU_SCALE * SELU_ALPHA * np.exp(x))


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax; a 1-D input is treated as a single row of scores."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise DataError("softmax input contains non-finite values")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def mse_loss(x: np.ndarray, xhat: np.ndarray) -> float:
    """Mean over rows of the squared L2 row norm of the residual.

    Per-cell, not per-element: a (n, m) residual contributes
    sum_j r_ij^2 for each row i, averaged over the n rows.
    """
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    if x.shape != xhat.shape:
        raise ShapeError("mse_loss inputs", x.shape, xhat.shape)
    r = x - xhat
    return float((r * r).sum() / x.shape[0])


def check_one_hot(onehot: np.ndarray, what: str = "labels") -> None:
    onehot = np.asarray(onehot)
    bad_entry = ~((onehot == 0.0) | (onehot == 1.0))
    if bad_entry.any():
        i, j = np.argwhere(bad_entry)[0]
        raise DataError(f"{what}: row {i} col {j} is {onehot[i, j]!r}, not 0 or 1")
    sums = onehot.sum(axis=-1)
    off = np.nonzero(sums != 1.0)[0]
    if off.size:
        raise DataError(f"{what}: row {off[0]} sums to {sums[off[0]]}, not a one-hot row")


def cce_loss(onehot: np.ndarray, probs: np.ndarray) -> float:
    """Categorical cross-entropy, mean over rows, probabilities floored at 1e-12."""
    onehot = np.asarray(onehot, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    if onehot.shape != probs.shape:
        raise ShapeError("cce_loss inputs", onehot.shape, probs.shape)
    check_one_hot(onehot, "cce_loss targets")
    p = np.clip(probs, PROB_FLOOR, 1.0)
    return float(-(onehot * np.log(p)).sum() / onehot.shape[0])
