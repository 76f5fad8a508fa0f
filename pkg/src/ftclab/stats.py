"""Statistical support: Welch's t-test with an in-repo t-distribution tail.

The two-sided tail probability of Student's t is computed through the
regularized incomplete beta function so the package carries no statistics
dependency.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

__all__ = [
    "regularized_incomplete_beta",
    "student_t_sf_two_sided",
    "welch_t_test",
    "WelchResult",
]

_MAX_CF_ITER = 300
_CF_EPS = 1e-15
_CF_TINY = 1e-300


def _beta_continued_fraction(a: float, b: float, x: float) -> float:
    """Lentz continued-fraction evaluation for the incomplete beta function."""
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _CF_TINY:
        d = _CF_TINY
    d = 1.0 / d
    h = d
    for m in range(1, _MAX_CF_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    raise RuntimeError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if a <= 0.0 or b <= 0.0:
        raise ValueError(f"shape parameters must be positive, got a={a}, b={b}")
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must lie in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    ln_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    # Continued fraction converges fastest on the side of the split point.
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_continued_fraction(a, b, x) / a
    return 1.0 - front * _beta_continued_fraction(b, a, 1.0 - x) / b


def student_t_sf_two_sided(t: float, dof: float) -> float:
    """P(|T| >= |t|) for T ~ Student-t with `dof` degrees of freedom."""
    if dof <= 0.0:
        raise ValueError(f"degrees of freedom must be positive, got {dof}")
    if t == 0.0:
        return 1.0
    x = dof / (dof + t * t)
    return regularized_incomplete_beta(0.5 * dof, 0.5, x)


@dataclass(frozen=True)
class WelchResult:
    t: float
    dof: float
    p_value: float
    significant: bool


def _mean_and_var(sample: Sequence[float]) -> tuple[float, float, int]:
    n = len(sample)
    mean = sum(sample) / n
    var = sum((v - mean) ** 2 for v in sample) / (n - 1)
    return mean, var, n


def welch_t_test(
    sample_a: Sequence[float],
    sample_b: Sequence[float],
    alpha: float = 0.05,
) -> WelchResult:
    """Heteroskedastic two-sample t-test for a difference of means.

    Uses the Welch statistic with Welch-Satterthwaite degrees of freedom and a
    two-sided significance decision at `alpha`.
    """
    if len(sample_a) < 2 or len(sample_b) < 2:
        raise ValueError("each sample needs at least 2 observations")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    mean_a, var_a, n_a = _mean_and_var(sample_a)
    mean_b, var_b, n_b = _mean_and_var(sample_b)
    if var_a == 0.0 and var_b == 0.0:
        raise ValueError("degenerate samples: both variances are zero")
    sa = var_a / n_a
    sb = var_b / n_b
    se = math.sqrt(sa + sb)
    t = (mean_a - mean_b) / se
    dof = (sa + sb) ** 2 / (
        (sa * sa) / (n_a - 1) + (sb * sb) / (n_b - 1)
    )
    p = student_t_sf_two_sided(t, dof)
    return WelchResult(t=t, dof=dof, p_value=p, significant=p < alpha)
