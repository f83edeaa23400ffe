"""Listening-test statistics: one-sided t-test and MOS confidence intervals.

The Student t distribution is evaluated through the regularised incomplete
beta function (Lentz continued fraction), so no statistics package is
needed at runtime.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PREFERENCE_RANGE = (-3.0, 3.0)
MOS_RANGE = (1.0, 5.0)


class DegenerateScoresError(ValueError):
    """Scores with zero spread have no t statistic."""


@dataclass(frozen=True)
class ScoreSet:
    label: str
    scores: tuple
    value_range: tuple = PREFERENCE_RANGE

    def __post_init__(self):
        scores = tuple(float(s) for s in self.scores)
        object.__setattr__(self, "scores", scores)
        if not scores:
            raise ValueError(f"score set {self.label!r} is empty")
        lo, hi = self.value_range
        bad = [s for s in scores if not lo <= s <= hi]
        if bad:
            raise ValueError(f"scores outside [{lo}, {hi}]: {bad[:5]}")

    def __len__(self):
        return len(self.scores)


def read_score_file(path, value_range=PREFERENCE_RANGE):
    """One score per line; ``#`` starts a comment."""
    scores = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            scores.append(float(line))
        except ValueError:
            raise ValueError(f"{path}:{n}: not a number: {line!r}") from None
    return ScoreSet(Path(path).stem, tuple(scores), value_range)


def _betacf(a, b, x, eps=1e-16, max_iter=500):
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a, b, x):
    """Regularised incomplete beta I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf(t, df):
    """P(T >= t) for Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise ValueError("degrees of freedom must be > 0")
    if t == 0:
        return 0.5
    tail = 0.5 * betainc(0.5 * df, 0.5, df / (df + t * t))
    return tail if t > 0 else 1.0 - tail


def t_cdf(t, df):
    return t_sf(-t, df)


def t_ppf(q, df, tol=1e-13):
    """Quantile of Student's t (bisection on the CDF after bracketing)."""
    if not 0.0 < q < 1.0:
        raise ValueError("q must lie in (0, 1)")
    if q == 0.5:
        return 0.0
    if q < 0.5:
        return -t_ppf(1.0 - q, df, tol)
    lo, hi = 0.0, 1.0
    while t_cdf(hi, df) < q:
        lo, hi = hi, 2.0 * hi
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if t_cdf(mid, df) < q:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _mean_sd(scores):
    x = np.asarray(scores.scores if isinstance(scores, ScoreSet) else scores, dtype=np.float64)
    n = x.size
    if n < 2:
        raise ValueError("need at least two scores")
    m = float(x.mean())
    sd = float(x.std(ddof=1))
    if not sd > 0:
        raise DegenerateScoresError("all scores are equal; standard deviation is zero")
    return n, m, sd


def one_sided_t_test(scores):
    """Mean preference and p = P(T_{n-1} >= t) for H0: mean <= 0."""
    n, m, sd = _mean_sd(scores)
    t = m / (sd / math.sqrt(n))
    return m, t_sf(t, n - 1)


def mos_summary(scores, alpha=0.05):
    """Mean and half-width of the two-sided (1 - alpha) t interval."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    n, m, sd = _mean_sd(scores)
    return m, t_ppf(1.0 - alpha / 2.0, n - 1) * sd / math.sqrt(n)
