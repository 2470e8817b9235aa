"""Sequence and correlation metrics used by the probes."""
from __future__ import annotations

import numpy as np
from scipy.stats import pearsonr

from .errors import UndefinedMetricError


def levenshtein(a, b):
    """Edit distance between two sequences (unit insert/delete/substitute)."""
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def unit_error_rate(hypotheses, references):
    """Summed edit distance over summed reference length."""
    total = sum(len(r) for r in references)
    if total == 0:
        raise UndefinedMetricError("unit error rate is undefined when every reference is empty")
    return sum(levenshtein(h, r) for h, r in zip(hypotheses, references)) / total


def pearson(x, y):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"pearson: length mismatch {x.shape} vs {y.shape}")
    if len(x) < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        raise UndefinedMetricError("correlation is undefined for a zero-variance input")
    return float(pearsonr(x, y).statistic)
