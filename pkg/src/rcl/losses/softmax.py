"""Softmax cross-entropy and its long-tail corrections, with analytic gradients."""

from __future__ import annotations

import numpy as np
from numpy.typing import ArrayLike, NDArray


def as_real(x: ArrayLike) -> NDArray[np.floating]:
    """Float64 array, except that extended-precision input stays extended."""
    arr = np.asarray(x)
    if arr.dtype == np.longdouble:
        return arr
    return np.asarray(arr, dtype=np.float64)


def log_sum_exp(v: ArrayLike) -> float:
    """``log(sum(exp(v)))`` with max-subtraction so large inputs do not overflow."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("log_sum_exp of an empty vector")
    m = float(v.max())
    if not np.isfinite(m):
        raise ValueError("log_sum_exp needs finite entries")
    return m + float(np.log(np.exp(v - m).sum()))


def softmax_xent_rows(logits: NDArray[np.float64], labels: NDArray[np.int64],
                      shift: NDArray[np.float64] | None = None
                      ) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Per-row ``-log softmax(logits + shift)[label]`` and its gradient.

    Returns the loss per row and ``d loss_r / d logits_r``. The target column
    of the gradient is computed as minus the mass on the other classes, which
    keeps it accurate when the target probability is close to one.
    """
    z = as_real(logits)
    if shift is not None:
        z = z + shift
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(z.shape[0])
    d = z - z[rows, labels][:, None]
    m = np.maximum(d.max(axis=1), 0.0)
    e = np.exp(d - m[:, None])
    e_target = e[rows, labels].copy()
    e[rows, labels] = 0.0
    others = e.sum(axis=1)
    total = e_target + others
    loss = np.where(m > 0, m + np.log(total), np.log1p(others))
    grad = e / total[:, None]
    grad[rows, labels] = -others / total
    return loss, grad


def _check_target(f: NDArray[np.float64], y: int) -> None:
    if f.ndim != 1 or f.size == 0:
        raise ValueError("logits must be a non-empty vector")
    if not np.all(np.isfinite(f)):
        raise ValueError("logits must be finite")
    if not 0 <= y < f.size:
        raise ValueError(f"class id {y} outside [0, {f.size})")


def ce_loss(f: ArrayLike, y: int) -> tuple[float, NDArray[np.float64]]:
    f = as_real(f)
    _check_target(f, y)
    loss, grad = softmax_xent_rows(f[None, :], np.array([y]))
    return loss[0], grad[0]


def balanced_softmax_shift(counts: ArrayLike) -> NDArray[np.float64]:
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts <= 0):
        raise ValueError("class counts must be positive")
    return np.log(counts)


def logit_adjustment_shift(priors: ArrayLike, tau_logit: float) -> NDArray[np.float64]:
    priors = np.asarray(priors, dtype=np.float64)
    if np.any(priors <= 0):
        raise ValueError("priors must be strictly positive")
    if abs(priors.sum() - 1.0) > 1e-9:
        raise ValueError(f"priors must sum to 1, got {priors.sum()!r}")
    if tau_logit < 0:
        raise ValueError("tau_logit must be non-negative")
    return tau_logit * np.log(priors)


def balanced_softmax_loss(f: ArrayLike, y: int, counts: ArrayLike
                          ) -> tuple[float, NDArray[np.float64]]:
    """Cross-entropy on logits shifted by ``log n_i`` (count-weighted softmax)."""
    f = as_real(f)
    _check_target(f, y)
    shift = balanced_softmax_shift(counts)
    if shift.shape != f.shape:
        raise ValueError("counts length must match number of logits")
    loss, grad = softmax_xent_rows(f[None, :], np.array([y]), shift)
    return loss[0], grad[0]


def logit_adjusted_loss(f: ArrayLike, y: int, priors: ArrayLike, tau_logit: float = 1.0
                        ) -> tuple[float, NDArray[np.float64]]:
    """Cross-entropy on logits shifted by ``tau * log prior_i``."""
    f = as_real(f)
    _check_target(f, y)
    shift = logit_adjustment_shift(priors, tau_logit)
    if shift.shape != f.shape:
        raise ValueError("priors length must match number of logits")
    loss, grad = softmax_xent_rows(f[None, :], np.array([y]), shift)
    return loss[0], grad[0]
