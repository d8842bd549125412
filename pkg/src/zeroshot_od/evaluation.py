"""Detection metrics, paired significance testing and rank aggregation."""

from __future__ import annotations

import math

import numpy as np
from scipy.stats import rankdata

EXACT_WILCOXON_MAX_N = 20


def _validate(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"scores ({scores.size}) and labels ({labels.size}) differ in length")
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError("labels must be binary 0/1")
    return scores, labels.astype(np.int64)


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC; tied positive/negative pairs count one half."""
    scores, labels = _validate(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both classes present")
    ranks = rankdata(scores)  # average ranks over ties
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def aupr(scores, labels) -> float:
    """Average precision: sum of precision times recall increments over
    descending distinct score thresholds (tied scores enter as one block)."""
    scores, labels = _validate(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("AUPR needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]  # final index of each tie block
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def f1_at_true_count(scores, labels) -> float:
    """F1 when exactly the top-k scores are flagged, k = number of positives.
    Ties at the cut favour the lower index."""
    scores, labels = _validate(scores, labels)
    k = int(labels.sum())
    if k == 0:
        raise ValueError("F1 at true count needs at least one positive")
    top = np.argsort(-scores, kind="stable")[:k]
    tp = int(labels[top].sum())
    # Predicted and actual positive counts are both k, so P = R = F1.
    return tp / k


def _exact_wplus_pvalue(abs_diff: np.ndarray, positive: np.ndarray) -> float:
    # Doubled average ranks are integers, so the null distribution of 2*W+
    # over all 2^n equally likely sign patterns is a subset-sum count.
    ranks2 = np.rint(2 * rankdata(abs_diff)).astype(np.int64)
    observed = int(ranks2[positive].sum())
    total = int(ranks2.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in ranks2:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:-r]
        counts = counts + shifted
    return float(counts[observed:].sum() / counts.sum())


def wilcoxon_one_sided(a, b) -> float:
    """One-sided paired Wilcoxon signed-rank p-value for H1: median(a - b) > 0.

    Zero differences are dropped.  Exact null distribution for up to 20
    remaining pairs, otherwise the normal approximation with tie-corrected
    variance and a 0.5 continuity correction.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"paired samples differ in length: {a.size} vs {b.size}")
    diff = a - b
    diff = diff[diff != 0]
    n = diff.size
    if n == 0:
        return 1.0
    abs_diff = np.abs(diff)
    positive = diff > 0
    if n <= EXACT_WILCOXON_MAX_N:
        return _exact_wplus_pvalue(abs_diff, positive)
    ranks = rankdata(abs_diff)
    w_plus = ranks[positive].sum()
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(abs_diff, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts ** 3 - tie_counts) / 48.0
    if var <= 0:
        return 1.0
    z = (w_plus - mean - 0.5) / math.sqrt(var)
    return float(min(1.0, 0.5 * math.erfc(z / math.sqrt(2.0))))


def average_ranks(metric_table, higher_is_better: bool = True) -> np.ndarray:
    """Mean per-dataset rank of each method (rows = methods, cols = datasets);
    rank 1 is best and ties share the average of their positions."""
    table = np.asarray(metric_table, dtype=np.float64)
    if table.ndim != 2 or table.size == 0:
        raise ValueError("metric table must be a non-empty methods x datasets matrix")
    if np.any(np.isnan(table)):
        raise ValueError("metric table has missing cells")
    return per_dataset_ranks(table, higher_is_better).mean(axis=1)


def per_dataset_ranks(table, higher_is_better: bool = True) -> np.ndarray:
    table = np.asarray(table, dtype=np.float64)
    keyed = -table if higher_is_better else table
    return rankdata(keyed, axis=0)


def performance_profile(metric_table, higher_is_better: bool = True):
    """Per-method empirical CDF of the suboptimality ratio tau >= 1.

    Returns ``(tau, profiles)`` where ``tau`` is the methods x datasets ratio
    table and ``profiles`` is a list of dicts with keys ``tau`` (sorted
    distinct ratios), ``cdf`` (fraction of datasets with ratio <= tau) and
    ``area`` (integral of the step CDF over ``[1, max observed tau]``).
    """
    table = np.asarray(metric_table, dtype=np.float64)
    if table.ndim != 2 or table.size == 0:
        raise ValueError("metric table must be a non-empty methods x datasets matrix")
    if np.any(table <= 0):
        raise ValueError("performance profiles need strictly positive metric values")
    if higher_is_better:
        tau = table.max(axis=0, keepdims=True) / table
    else:
        tau = table / table.min(axis=0, keepdims=True)
    tau_max = float(tau.max())
    n_data = table.shape[1]
    profiles = []
    for row in tau:
        values, counts = np.unique(row, return_counts=True)
        cdf = np.cumsum(counts) / n_data
        edges = np.r_[values, tau_max]
        area = float(np.sum(cdf * np.diff(edges)))
        profiles.append({"tau": values, "cdf": cdf, "area": area})
    return tau, profiles
