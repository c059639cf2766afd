"""Paired significance testing without an external statistics dependency.

The two-sided p-value comes from the Student-t tail computed with the
regularized incomplete beta function (continued-fraction evaluation), which
keeps the result checkable against a Monte-Carlo tail estimate.
"""

from __future__ import annotations

import math
from typing import NamedTuple, Sequence

from .errors import DegenerateError, DomainError


class TTestResult(NamedTuple):
    t: float
    df: int
    p: float


def _betacf(a: float, b: float, x: float, max_iter: int = 300, eps: float = 3e-14) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
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
        if abs(delta - 1.0) < eps:
            return h
    raise DomainError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(x: float, a: float, b: float) -> float:
    """I_x(a, b) for 0 <= x <= 1, a > 0, b > 0."""
    if a <= 0.0 or b <= 0.0:
        raise DomainError("beta parameters must be positive")
    if not 0.0 <= x <= 1.0:
        raise DomainError(f"x must be in [0,1], got {x}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, df: int) -> float:
    """P(|T| >= |t|) for a Student-t variable with ``df`` degrees of freedom."""
    if df < 1:
        raise DomainError(f"df must be >= 1, got {df}")
    if math.isinf(t):
        return 0.0
    x = df / (df + t * t)
    return regularized_incomplete_beta(x, df / 2.0, 0.5)


def paired_ttest(correct_a: Sequence[float], correct_b: Sequence[float]) -> TTestResult:
    """Two-sided paired t-test over per-example scores of two models.

    Inputs are typically 0/1 correctness vectors aligned by example. Raises
    DegenerateError when the two vectors are identical (all differences 0),
    since the statistic is undefined there.
    """
    if len(correct_a) != len(correct_b):
        raise DomainError(
            f"length mismatch: {len(correct_a)} vs {len(correct_b)}"
        )
    n = len(correct_a)
    if n < 2:
        raise DomainError("paired t-test needs at least 2 observations")
    diffs = [float(a) - float(b) for a, b in zip(correct_a, correct_b)]
    if all(d == 0.0 for d in diffs):
        raise DegenerateError("all paired differences are zero")
    mean = sum(diffs) / n
    var = sum((d - mean) ** 2 for d in diffs) / (n - 1)
    df = n - 1
    if var == 0.0:
        # All differences equal and nonzero: the statistic diverges.
        t = math.inf if mean > 0 else -math.inf
        return TTestResult(t=t, df=df, p=0.0)
    t = mean / math.sqrt(var / n)
    return TTestResult(t=t, df=df, p=student_t_two_sided_p(t, df))
