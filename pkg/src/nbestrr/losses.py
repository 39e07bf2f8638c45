"""Training objectives: per-token cross-entropy plus the two sequence-level
losses, expected word error over the N-best posterior and the score
distribution cross-entropy against reference similarities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, UsageError


@dataclass(frozen=True)
class LossBreakdown:
    ce: float
    mwer_or_mqsd: float
    combined: T.Tensor
    weight: float


def ce_loss(token_logps: T.Tensor, pad_mask=None) -> T.Tensor:
    """Mean negative log-probability over non-pad target positions.

    pad_mask is boolean with True marking excluded (pad) slots; omit it when
    every position is real.
    """
    if pad_mask is None:
        live = np.ones_like(token_logps.values)
    else:
        mask = np.asarray(pad_mask, dtype=bool)
        if mask.shape != token_logps.values.shape:
            raise UsageError(
                f"ce_loss: mask shape {mask.shape} != logps shape {token_logps.values.shape}")
        live = (~mask).astype(np.float64)
    count = live.sum()
    if count == 0:
        raise UsageError("ce_loss: no non-pad target tokens")
    total = T.reduce_sum(T.mul(token_logps, T.constant(live)))
    return T.scale(total, -1.0 / count)


def mwer_loss(p: T.Tensor, word_errors) -> T.Tensor:
    """Expected excess word errors under the hypothesis posterior.

    Sum of p_i (W_i - mean(W)); differentiable through p, which must already
    be normalized. Constant shifts of W cancel exactly, and a single
    hypothesis or an all-equal W gives zero.
    """
    errors = np.asarray(word_errors, dtype=np.float64)
    if p.values.ndim != 1 or p.values.shape != errors.shape or errors.size < 1:
        raise UsageError(
            f"mwer_loss: need matching 1-d p and W, got {p.values.shape} vs {errors.shape}")
    total = float(p.values.sum())
    if abs(total - 1.0) > 1e-6:
        raise UsageError(f"mwer_loss: probabilities sum to {total}, not 1")
    return T.reduce_sum(T.mul(p, T.constant(errors - errors.mean())))


def mqsd_loss(similarities, predicted: T.Tensor) -> T.Tensor:
    """Cross-entropy from softmax(similarities) to softmax(predicted scores).

    Minimized exactly when the predicted scores reproduce the similarity
    distribution, where it equals that distribution's entropy.
    """
    s = np.asarray(similarities, dtype=np.float64)
    if predicted.values.ndim != 1 or predicted.values.shape != s.shape or s.size < 1:
        raise UsageError(
            f"mqsd_loss: need matching 1-d s and predictions, got {s.shape} "
            f"vs {predicted.values.shape}")
    z = np.exp(s - s.max())
    target = z / z.sum()
    logq = T.log_softmax(predicted, axis=-1)
    return T.scale(T.reduce_sum(T.mul(logq, T.constant(target))), -1.0)


def mwer_loss_rows(p: T.Tensor, word_errors) -> T.Tensor:
    """Row-batched expected excess word errors, averaged over the rows."""
    errors = np.asarray(word_errors, dtype=np.float64)
    if p.values.ndim != 2 or p.values.shape != errors.shape:
        raise UsageError(
            f"mwer_loss_rows: need matching (B, N), got {p.values.shape} vs {errors.shape}")
    sums = p.values.sum(axis=-1)
    if np.abs(sums - 1.0).max() > 1e-6:
        raise UsageError("mwer_loss_rows: a row's probabilities do not sum to 1")
    centered = errors - errors.mean(axis=-1, keepdims=True)
    return T.reduce_mean(T.reduce_sum(T.mul(p, T.constant(centered)), axis=-1))


def mqsd_loss_rows(similarities, predicted: T.Tensor) -> T.Tensor:
    """Row-batched score distribution cross-entropy, averaged over the rows."""
    s = np.asarray(similarities, dtype=np.float64)
    if predicted.values.ndim != 2 or predicted.values.shape != s.shape:
        raise UsageError(
            f"mqsd_loss_rows: need matching (B, N), got {predicted.values.shape} vs {s.shape}")
    z = np.exp(s - s.max(axis=-1, keepdims=True))
    target = z / z.sum(axis=-1, keepdims=True)
    logq = T.log_softmax(predicted, axis=-1)
    per_row = T.reduce_sum(T.mul(logq, T.constant(target)), axis=-1)
    return T.scale(T.reduce_mean(per_row), -1.0)


def combined(ce: T.Tensor, aux: T.Tensor, weight: float) -> LossBreakdown:
    """aux + weight * ce, keeping the parts for logging."""
    if weight < 0:
        raise ConfigurationError(f"combined: weight {weight} is negative")
    total = T.add(aux, T.scale(ce, weight))
    return LossBreakdown(ce=float(ce.values), mwer_or_mqsd=float(aux.values),
                         combined=total, weight=float(weight))
