"""Paired one-tailed t-test and inter-rater agreement statistics.

Self-contained: the Student-t tail probability comes from a continued
fraction for the regularized incomplete beta function, no statistics
library involved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError

_BETA_TOL = 1e-10
_BETA_MAX_ITER = 500


def _betacf(x: float, a: float, b: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, _BETA_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _BETA_TOL:
            return h
    raise InputError("incomplete beta continued fraction failed to converge")


def regularized_incomplete_beta(x: float, a: float, b: float) -> float:
    """I_x(a, b) for x in [0, 1], a, b > 0."""
    if not 0.0 <= x <= 1.0:
        raise InputError(f"x must be in [0, 1], got {x}")
    if a <= 0 or b <= 0:
        raise InputError("a and b must be positive")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    # pick the representation with the better-converging continued fraction
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(x, a, b) / a
    return 1.0 - front * _betacf(1.0 - x, b, a) / b


def t_upper_tail(t: float, df: int) -> float:
    """P(T >= t) for Student's t with df degrees of freedom."""
    if df < 1:
        raise InputError("degrees of freedom must be >= 1")
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    x = df / (df + t * t)
    half_tail = 0.5 * regularized_incomplete_beta(x, df / 2.0, 0.5)
    return half_tail if t >= 0 else 1.0 - half_tail


@dataclass(frozen=True)
class TTestResult:
    t: float
    degrees_of_freedom: int
    p: float
    n_pairs: int
    mean_difference: float
    degenerate: bool = False


def paired_one_tailed_ttest(with_values, without_values) -> TTestResult:
    """Paired one-tailed t-test: alternative is mean(with) > mean(without).

    Uses the sample standard deviation (n - 1 denominator).  Zero-variance
    differences are reported with the t = +/-inf convention, p in {0, 1} and
    a degenerate flag; all-zero differences degenerate to t = 0, p = 0.5.
    """
    d = np.asarray(with_values, dtype=np.float64) - np.asarray(without_values, dtype=np.float64)
    if d.ndim != 1:
        raise InputError("paired samples must be 1-D sequences")
    n = d.size
    if n < 2:
        raise InputError("need at least 2 pairs for a paired t-test")
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    df = n - 1
    if sd == 0.0:
        if mean > 0:
            return TTestResult(math.inf, df, 0.0, n, mean, degenerate=True)
        if mean < 0:
            return TTestResult(-math.inf, df, 1.0, n, mean, degenerate=True)
        return TTestResult(0.0, df, 0.5, n, mean, degenerate=True)
    t = mean / (sd / math.sqrt(n))
    return TTestResult(float(t), df, t_upper_tail(t, df), n, mean)


# Inter-rater agreement -----------------------------------------------------


def cohen_kappa(rater_a, rater_b) -> float:
    """Cohen's kappa between exactly two raters over the same items."""
    a = list(rater_a)
    b = list(rater_b)
    if len(a) != len(b):
        raise InputError("raters must rate the same items")
    if not a:
        raise InputError("no items to rate")
    n = len(a)
    categories = sorted(set(a) | set(b), key=str)
    idx = {c: i for i, c in enumerate(categories)}
    table = np.zeros((len(categories), len(categories)), dtype=np.float64)
    for x, y in zip(a, b):
        table[idx[x], idx[y]] += 1
    p_o = np.trace(table) / n
    p_e = float(np.sum(table.sum(axis=1) * table.sum(axis=0)) / (n * n))
    if p_e == 1.0:
        return 1.0 if p_o == 1.0 else 0.0
    return float((p_o - p_e) / (1.0 - p_e))


def fleiss_kappa(ratings: np.ndarray) -> float:
    """Fleiss' kappa over an items x raters categorical matrix."""
    counts, n_raters = _category_counts(ratings)
    n_items, _ = counts.shape
    if n_raters < 2:
        raise InputError("Fleiss kappa needs at least 2 raters")
    p_cat = counts.sum(axis=0) / (n_items * n_raters)
    p_item = (np.sum(counts * counts, axis=1) - n_raters) / (n_raters * (n_raters - 1))
    p_bar = float(p_item.mean())
    p_exp = float(np.sum(p_cat * p_cat))
    if p_exp == 1.0:
        return 1.0 if p_bar == 1.0 else 0.0
    return float((p_bar - p_exp) / (1.0 - p_exp))


def _category_counts(ratings) -> tuple[np.ndarray, int]:
    ratings = np.asarray(ratings, dtype=object)
    if ratings.ndim != 2:
        raise InputError("ratings must be an items x raters matrix")
    n_items, n_raters = ratings.shape
    if n_items == 0 or n_raters == 0:
        raise InputError("ratings matrix is empty")
    flat = ratings.ravel()
    for v in flat:
        if v is None or (isinstance(v, float) and math.isnan(v)):
            raise InputError("ratings matrix has missing cells")
    categories = sorted(set(flat), key=str)
    idx = {c: i for i, c in enumerate(categories)}
    counts = np.zeros((n_items, len(categories)), dtype=np.float64)
    for i in range(n_items):
        for j in range(n_raters):
            counts[i, idx[ratings[i, j]]] += 1
    return counts, n_raters


def rater_agreement(ratings, mode: str = "fleiss") -> float:
    """Chance-corrected agreement: Cohen for rater pairs, Fleiss for any count."""
    ratings = np.asarray(ratings, dtype=object)
    if ratings.ndim != 2:
        raise InputError("ratings must be an items x raters matrix")
    if mode == "cohen":
        if ratings.shape[1] != 2:
            raise InputError("Cohen's kappa requires exactly 2 raters")
        _category_counts(ratings)  # missing-cell validation
        return cohen_kappa(ratings[:, 0], ratings[:, 1])
    if mode == "fleiss":
        return fleiss_kappa(ratings)
    raise InputError(f"unknown agreement mode {mode!r}; expected 'cohen' or 'fleiss'")
