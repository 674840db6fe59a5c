"""Additive-hazard risk head and the censoring-aware training loss.

The head maps a patient embedding to cumulative-risk logits at a fixed set
of horizons: a scalar baseline plus a running sum of non-negative per-bin
hazard increments,

    s_k = base + sum_{j<=k} softplus(r_j),

so P(event by horizon k) = sigmoid(s_k) is monotone in k by construction.

Training uses per-horizon binary cross-entropy restricted to horizons the
record can actually answer: an observed event answers every horizon, while
a censored record answers only horizons inside its follow-up.  Unanswerable
horizons contribute exactly zero, so predictions there cannot move the loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as tc
from .errors import DataError, DimensionError
from .tensor import Tensor

DEFAULT_HORIZONS = (12.0, 24.0, 36.0, 48.0, 60.0)


@dataclass(frozen=True)
class Outcome:
    """Event time in months when ``event`` is true, otherwise censoring time."""

    event: bool
    months: float

    def __post_init__(self):
        if not np.isfinite(self.months) or self.months <= 0:
            raise DataError(f"outcome months must be positive, got {self.months}")


def horizon_labels(outcome: Outcome,
                   horizons: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Per-horizon (label, answerable) pair for one record.

    An event at ``e`` answers every horizon (1 when e <= h, else 0).  A
    record censored at ``f`` answers only horizons with h <= f, all 0.
    """
    h = np.asarray(horizons, dtype=np.float64)
    if outcome.event:
        return (outcome.months <= h).astype(np.float64), np.ones_like(h, dtype=bool)
    return np.zeros_like(h), h <= outcome.months


def label_matrix(outcomes: Sequence[Outcome],
                 horizons: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Stacked labels (B, K) and answerability mask (B, K)."""
    pairs = [horizon_labels(o, horizons) for o in outcomes]
    labels = np.stack([p[0] for p in pairs])
    answerable = np.stack([p[1] for p in pairs])
    return labels, answerable


def positive_class_weights(outcomes: Sequence[Outcome],
                           horizons: Sequence[float]) -> np.ndarray:
    """Per-horizon positive-term weight neg/pos over answerable records.

    Horizons with no positives (or no negatives) fall back to weight 1 so a
    degenerate split cannot produce an infinite or zero weight.
    """
    labels, answerable = label_matrix(outcomes, horizons)
    pos = (labels * answerable).sum(axis=0)
    neg = ((1.0 - labels) * answerable).sum(axis=0)
    w = np.ones(len(horizons))
    ok = (pos > 0) & (neg > 0)
    w[ok] = neg[ok] / pos[ok]
    return w


def risk_logits(z: Tensor, base_w, base_b, rate_w, rate_b) -> Tensor:
    """Cumulative-risk logits (B, K) from embeddings (B, d)."""
    base = tc.affine(z, base_w, base_b)                    # (B, 1)
    rates = tc.softplus(tc.affine(z, rate_w, rate_b))      # (B, K)
    return tc.add(tc.cumsum(rates, axis=1), base)


def event_probabilities(logits: np.ndarray) -> np.ndarray:
    """sigmoid(logits), numerically via tanh."""
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(logits, dtype=np.float64)))


def bce_loss(logits: Tensor, outcomes: Sequence[Outcome],
             horizons: Sequence[float],
             class_weights: np.ndarray | None = None
             ) -> tuple[Tensor, int, int]:
    """Masked per-horizon cross-entropy.

    Returns (loss, n_used, n_skipped): each record contributes the sum of
    its answerable horizon terms; the loss is the mean over records with at
    least one answerable horizon, and records with none are skipped and
    counted.  ``class_weights`` scales only the positive-label terms.
    Raises :class:`DataError` when no record is usable.
    """
    K = len(horizons)
    if logits.ndim != 2 or logits.shape != (len(outcomes), K):
        raise DimensionError(
            f"logits {logits.shape} must be ({len(outcomes)}, {K})")
    labels, answerable = label_matrix(outcomes, horizons)
    w = np.ones(K) if class_weights is None else np.asarray(class_weights,
                                                            dtype=np.float64)
    if w.shape != (K,):
        raise DimensionError(f"class weights {w.shape} must be ({K},)")

    used_rows = answerable.any(axis=1)
    n_used = int(used_rows.sum())
    n_skipped = len(outcomes) - n_used
    if n_used == 0:
        raise DataError("no record answers any horizon; loss is undefined")

    ans = answerable.astype(np.float64)
    pos_coef = labels * w[None, :] * ans          # weighted positive terms
    neg_coef = (1.0 - labels) * ans
    terms = tc.add(tc.mul(tc.logsigmoid(logits), pos_coef),
                   tc.mul(tc.logsigmoid(tc.neg(logits)), neg_coef))
    loss = tc.mul(tc.sum_all(terms), -1.0 / n_used)
    return loss, n_used, n_skipped
