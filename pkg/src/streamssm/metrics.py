"""Binary classification metrics with pinned tie and interpolation conventions.

* AUROC is the Mann-Whitney statistic, ties counting one half.
* AUPR sweeps thresholds over the distinct scores (tied scores enter
  together), replaces each precision by its envelope ``max_{r' >= r} P(r')``
  and sums ``(R_k - R_{k-1}) * envelope_k``.
* A score is predicted positive when ``score >= threshold``.
"""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


class UndefinedMetricError(ValueError):
    pass


def _check(scores, labels):
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel().astype(int)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    if not np.all(np.isin(y, (0, 1))):
        raise ValueError("labels must be 0/1")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == len(y):
        raise UndefinedMetricError("metric needs both positive and negative examples")
    return s, y, n_pos, len(y) - n_pos


def auroc(scores, labels) -> float:
    s, y, n_pos, n_neg = _check(scores, labels)
    # twice the midranks are integers, so the numerator is exact
    r2 = np.rint(2 * rankdata(s, method="average")).astype(np.int64)
    two_u = int(r2[y == 1].sum()) - n_pos * (n_pos + 1)
    return two_u / (2 * n_pos * n_neg)


def pr_points(scores, labels):
    """Recall and precision after admitting each distinct score, highest first."""
    s, y, n_pos, _ = _check(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last_of_group = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(y)[last_of_group]
    k = (np.arange(len(s)) + 1)[last_of_group]
    return tp / n_pos, tp / k


def aupr(scores, labels) -> float:
    recall, precision = pr_points(scores, labels)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.r_[0.0, recall])
    return float(np.sum(steps * envelope))


def confusion_rates(scores, labels, threshold: float):
    s, y, n_pos, n_neg = _check(scores, labels)
    pred = s >= threshold
    tpr = np.count_nonzero(pred & (y == 1)) / n_pos
    tnr = np.count_nonzero(~pred & (y == 0)) / n_neg
    return tpr, tnr


def balanced_accuracy(scores, labels, threshold: float = 0.5) -> float:
    tpr, tnr = confusion_rates(scores, labels, threshold)
    return (tpr + tnr) / 2


def youden_threshold(scores, labels) -> float:
    """Observed score maximising ``TPR - FPR``; ties go to the lower threshold."""
    s, y, n_pos, n_neg = _check(scores, labels)
    cand = np.unique(s)  # ascending
    tp = n_pos - np.searchsorted(np.sort(s[y == 1]), cand, side="left")
    fp = n_neg - np.searchsorted(np.sort(s[y == 0]), cand, side="left")
    j = tp * n_neg - fp * n_pos  # TPR - FPR scaled to integers so ties are exact
    return float(cand[int(np.argmax(j))])  # argmax keeps the first (lowest) of tied maxima


def summary(scores, labels) -> dict[str, float]:
    th = youden_threshold(scores, labels)
    return {
        "auroc": auroc(scores, labels),
        "aupr": aupr(scores, labels),
        "bac_0.5": balanced_accuracy(scores, labels, 0.5),
        "youden_threshold": th,
        "bac_youden": balanced_accuracy(scores, labels, th),
    }
