"""Correlation and signed-rank tests for comparing task-selection metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats as _sps

__all__ = ["StatResult", "pearson", "kendall_tau", "wilcoxon_signed_rank",
           "wilcoxon_exact_distribution", "EXACT_MAX_N"]

EXACT_MAX_N = 12


@dataclass(frozen=True)
class StatResult:
    statistic: float
    p_value: float
    n: int
    method: str


def _pair(x, y, min_n):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < min_n:
        raise ValueError(f"need at least {min_n} pairs, got {x.size}")
    return x, y


def pearson(x, y):
    """Sample correlation with a two-sided t-test p-value (``n - 2`` dof)."""
    x, y = _pair(x, y, 3)
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise ValueError("pearson correlation needs non-zero variance in both samples")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    r = max(-1.0, min(1.0, r))
    n = x.size
    if abs(r) == 1.0:
        p = 0.0
    else:
        t = r * math.sqrt((n - 2) / (1.0 - r * r))
        p = float(2.0 * _sps.t.sf(abs(t), n - 2))
    return StatResult(r, min(1.0, p), n, "exact")


def kendall_tau(x, y):
    """Tau-b with a normal-approximation p-value (two-sided).

    Concordant/discordant pairs are counted exactly; the null variance
    includes the usual tie corrections.
    """
    x, y = _pair(x, y, 2)
    n = x.size
    i, j = np.triu_indices(n, k=1)
    sx = np.sign(x[i] - x[j])
    sy = np.sign(y[i] - y[j])
    s = float((sx * sy).sum())
    n0 = n * (n - 1) / 2
    n1 = float((sx == 0).sum())
    n2 = float((sy == 0).sum())
    denom = math.sqrt((n0 - n1) * (n0 - n2))
    if denom == 0:
        raise ValueError("kendall tau is undefined when one sample is entirely tied")
    tau = max(-1.0, min(1.0, s / denom))

    def tie_terms(v):
        _, counts = np.unique(v, return_counts=True)
        c = counts[counts > 1].astype(np.float64)
        return ((c * (c - 1) * (2 * c + 5)).sum(), (c * (c - 1)).sum(),
                (c * (c - 1) * (c - 2)).sum())

    vx, tx, ux = tie_terms(x)
    vy, ty, uy = tie_terms(y)
    var = (n * (n - 1) * (2 * n + 5) - vx - vy) / 18.0
    var += tx * ty / (2.0 * n * (n - 1))
    if n > 2:
        var += ux * uy / (9.0 * n * (n - 1) * (n - 2))
    p = 1.0 if var <= 0 else float(2.0 * _sps.norm.sf(abs(s) / math.sqrt(var)))
    return StatResult(tau, min(1.0, p), n, "normal_approx")


def _signed_ranks(x, y):
    d = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    d = d[d != 0]
    if d.size == 0:
        raise ValueError("all differences are zero; the signed-rank test is undefined")
    ranks = _sps.rankdata(np.abs(d))  # mid-ranks for ties
    return d, ranks


def wilcoxon_exact_distribution(ranks):
    """Null distribution of ``W+`` as ``{w: probability}``.

    Ranks may be mid-ranks, so the computation runs on doubled (integer)
    ranks with a subset-sum recurrence.
    """
    twice = np.rint(2 * np.asarray(ranks, dtype=np.float64)).astype(np.int64)
    counts = np.zeros(int(twice.sum()) + 1)
    counts[0] = 1.0
    for r in twice:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:counts.size - r]
        counts = counts + shifted
    total = 2.0 ** len(twice)
    return {k / 2.0: c / total for k, c in enumerate(counts) if c}


def wilcoxon_signed_rank(x, y, alternative="two_sided", exact=None):
    """Signed-rank test of ``x - y``; the statistic is ``W+``.

    Zero differences are dropped and tied magnitudes get mid-ranks.  The
    p-value is exact (full sign-pattern distribution) when at most
    ``EXACT_MAX_N`` non-zero differences remain, otherwise a normal
    approximation with continuity correction is used.  ``exact`` forces
    either route.
    """
    if alternative not in ("two_sided", "greater", "less"):
        raise ValueError(f"unknown alternative {alternative!r}")
    x, y = _pair(x, y, 1)
    d, ranks = _signed_ranks(x, y)
    n = d.size
    w_plus = float(ranks[d > 0].sum())
    if exact is None:
        exact = n <= EXACT_MAX_N
    if exact:
        dist = wilcoxon_exact_distribution(ranks)
        upper = sum(pr for w, pr in dist.items() if w >= w_plus - 1e-9)
        lower = sum(pr for w, pr in dist.items() if w <= w_plus + 1e-9)
        method = "exact"
    else:
        mean = n * (n + 1) / 4.0
        _, counts = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - (counts ** 3 - counts).sum() / 48.0
        sd = math.sqrt(var)
        upper = float(_sps.norm.sf((w_plus - mean - 0.5) / sd))
        lower = float(_sps.norm.cdf((w_plus - mean + 0.5) / sd))
        method = "normal_approx"
    if alternative == "greater":
        p = upper
    elif alternative == "less":
        p = lower
    else:
        p = 2.0 * min(upper, lower)
    return StatResult(w_plus, float(min(1.0, max(0.0, p))), n, method)
