"""Discrimination metrics for censored time-to-event predictions.

All functions take plain arrays: ``times`` (months to event or censoring),
``events`` (True when the event was observed), and model scores.  Higher
scores must mean higher risk (earlier expected event).
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, EmptyReductionError, UndefinedMetricError


def _clean(times, events, scores):
    t = np.asarray(times, dtype=np.float64).ravel()
    e = np.asarray(events, dtype=bool).ravel()
    s = np.asarray(scores, dtype=np.float64).ravel()
    if not (t.shape == e.shape == s.shape):
        raise DimensionError(
            f"times {t.shape}, events {e.shape}, scores {s.shape} must match")
    if not (np.isfinite(t).all() and np.isfinite(s).all()):
        raise UndefinedMetricError("non-finite times or scores")
    return t, e, s


def concordance_index(times, events, scores) -> float:
    """Harrell's c-index.

    A pair (i, j) is comparable when i has an observed event and t_i < t_j;
    it is concordant when the earlier-event patient got the higher score,
    and score ties count half.  Raises :class:`UndefinedMetricError` when no
    comparable pair exists (e.g. all records censored).
    """
    t, e, s = _clean(times, events, scores)
    comparable = e[:, None] & (t[:, None] < t[None, :])
    n_comp = int(comparable.sum())
    if n_comp == 0:
        raise UndefinedMetricError("no comparable pair for the c-index")
    concordant = int((comparable & (s[:, None] > s[None, :])).sum())
    tied = int((comparable & (s[:, None] == s[None, :])).sum())
    return (concordant + 0.5 * tied) / n_comp


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties averaged (midranks)."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    sx = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc_at_horizon(times, events, scores, horizon: float) -> float:
    """Mann-Whitney AUC for the binary question "event by ``horizon``?".

    Positives: events at or before the horizon.  Negatives: records known
    event-free at the horizon (later events, or censoring at/after it).
    Records censored before the horizon cannot be labeled and are dropped.
    Raises :class:`UndefinedMetricError` when either class is empty.
    """
    t, e, s = _clean(times, events, scores)
    if not np.isfinite(horizon) or horizon <= 0:
        raise UndefinedMetricError(f"horizon must be positive, got {horizon}")
    pos = e & (t <= horizon)
    neg = (e & (t > horizon)) | (~e & (t >= horizon))
    keep = pos | neg
    n_pos = int(pos.sum())
    n_neg = int(neg.sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"horizon {horizon}: {n_pos} positives, {n_neg} negatives")
    ranks = _average_ranks(s[keep])
    rank_sum = ranks[pos[keep]].sum()
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def fold_summary(values) -> tuple[float, float]:
    """(mean, sample std) across folds; std is NaN for a single fold."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise EmptyReductionError("no fold values to summarize")
    if not np.isfinite(v).all():
        raise UndefinedMetricError("non-finite fold value")
    std = float(np.std(v, ddof=1)) if v.size > 1 else float("nan")
    return float(v.mean()), std
