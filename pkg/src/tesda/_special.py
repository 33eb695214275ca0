"""Chi-squared distribution numerics built on the regularized incomplete
gamma function (series below the shape parameter, Lentz continued fraction
above). Dependency-free on purpose: these back both the MCD consistency
rescaling and the test oracles, independently of the closed-form bounds."""

from __future__ import annotations

import math

from .errors import NumericalError, ValidationError

_MAX_ITER = 500
_EPS = 1e-16
_TINY = 1e-300


def _gamma_p_series(a: float, x: float) -> float:
    # P(a,x) = x^a e^-x / Gamma(a) * sum_n x^n / (a(a+1)...(a+n))
    term = 1.0 / a
    total = term
    for n in range(1, _MAX_ITER):
        term *= x / (a + n)
        total += term
        if abs(term) < abs(total) * _EPS:
            return total * math.exp(-x + a * math.log(x) - math.lgamma(a))
    raise NumericalError(f"incomplete gamma series failed to converge (a={a}, x={x})")


def _gamma_q_lentz(a: float, x: float) -> float:
    # Q(a,x) via modified Lentz evaluation of the continued fraction
    # x^a e^-x / Gamma(a) * 1/(x+1-a- 1*(1-a)/(x+3-a- ...))
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b if b != 0.0 else 1.0 / _TINY
    f = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        f *= delta
        if abs(delta - 1.0) < _EPS:
            return f * math.exp(-x + a * math.log(x) - math.lgamma(a))
    raise NumericalError(f"incomplete gamma fraction failed to converge (a={a}, x={x})")


def gamma_p(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x), for a > 0, x >= 0."""
    if a <= 0.0:
        raise ValidationError(f"gamma shape must be positive, got {a}")
    if x < 0.0:
        raise ValidationError(f"gamma argument must be non-negative, got {x}")
    if x == 0.0:
        return 0.0
    if x < a + 1.0:
        return _gamma_p_series(a, x)
    return 1.0 - _gamma_q_lentz(a, x)


def gamma_q(a: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(a, x) = 1 - P(a, x)."""
    if a <= 0.0:
        raise ValidationError(f"gamma shape must be positive, got {a}")
    if x < 0.0:
        raise ValidationError(f"gamma argument must be non-negative, got {x}")
    if x == 0.0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gamma_p_series(a, x)
    return _gamma_q_lentz(a, x)


def chi2_cdf(k: int, x: float) -> float:
    """P[chi2_k <= x]."""
    if k < 1:
        raise ValidationError(f"degrees of freedom must be >= 1, got {k}")
    if x <= 0.0:
        return 0.0
    return gamma_p(k / 2.0, x / 2.0)


def chi2_sf(k: int, x: float) -> float:
    """P[chi2_k >= x] (survival function)."""
    if k < 1:
        raise ValidationError(f"degrees of freedom must be >= 1, got {k}")
    if x <= 0.0:
        return 1.0
    return gamma_q(k / 2.0, x / 2.0)


def chi2_quantile(k: int, p: float) -> float:
    """Inverse CDF of chi2_k by bracketed bisection on chi2_cdf.

    The result x satisfies |chi2_cdf(k, x) - p| <= 1e-10.
    """
    if not 0.0 < p < 1.0:
        raise ValidationError(f"quantile probability must be in (0, 1), got {p}")
    if k < 1:
        raise ValidationError(f"degrees of freedom must be >= 1, got {k}")
    lo, hi = 0.0, float(k) + 10.0 * math.sqrt(2.0 * k) + 10.0
    while chi2_cdf(k, hi) < p:
        hi *= 2.0
        if hi > 1e15:
            raise NumericalError(f"chi2 quantile bracket overflow (k={k}, p={p})")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if chi2_cdf(k, mid) < p:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-13 * max(1.0, hi):
            break
    x = 0.5 * (lo + hi)
    if abs(chi2_cdf(k, x) - p) > 1e-10:
        raise NumericalError(f"chi2 quantile did not meet tolerance (k={k}, p={p})")
    return x
