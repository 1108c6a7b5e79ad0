"""Wilcoxon signed-rank test for paired accuracies."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm, rankdata

EXACT_MAX_N = 20


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    p_value: float
    n: int
    method: str  # "exact", "normal" or "degenerate"

    @property
    def degenerate(self) -> bool:
        return self.method == "degenerate"


def _exact_p(ranks: np.ndarray, w: float) -> float:
    """Two-sided p from the exact null distribution of the positive rank sum.

    Ranks may be half-integers under ties, so the distribution is built over
    doubled ranks by counting sign assignments.
    """
    doubled = np.rint(2 * ranks).astype(np.int64)
    total = int(doubled.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled:  # every rank is >= 1, so r >= 2
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:-r]
        counts += shifted
    cutoff = int(np.rint(2 * w))
    tail = counts[: cutoff + 1].sum() / 2.0 ** len(ranks)
    return float(min(1.0, 2 * tail))


def wilcoxon_signed_rank(a, b, exact_max_n: int = EXACT_MAX_N) -> WilcoxonResult:
    """Paired two-sided Wilcoxon signed-rank test of ``a`` against ``b``.

    Zero differences are dropped. Ties in ``|a - b|`` get average ranks and
    ``W`` is the smaller of the positive and negative rank sums. The p-value is
    exact for up to ``exact_max_n`` non-zero differences, and above that it uses
    a normal approximation with tie correction. All-zero differences give
    ``p = 1`` with ``method="degenerate"``.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples must be 1-D of equal length, got {a.shape} and {b.shape}")
    d = a - b
    d = d[d != 0]
    n = len(d)
    if n == 0:
        return WilcoxonResult(0.0, 1.0, 0, "degenerate")
    if n < 5:
        raise ValueError(f"need at least 5 non-zero differences, got {n}")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    if n <= exact_max_n:
        return WilcoxonResult(w, _exact_p(ranks, w), n, "exact")
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts ** 3 - tie_counts)) / 48.0
    z = (w - mean) / math.sqrt(var)
    return WilcoxonResult(w, float(min(1.0, 2 * norm.cdf(z))), n, "normal")
