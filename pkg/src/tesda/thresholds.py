"""Closed-form squared-distance thresholds delta(epsilon) from tail bounds
on chi2_k, plus inversion from target false-negative / false-positive
rates.

Three bounds of decreasing conservatism are provided:

  chebyshev        delta = sqrt(k(n^2-4) / (eps*n^2 - 2nk)),   needs eps > 2k/n
  subexponential   piecewise in delta:
                     sqrt(4k*sqrt(ln(1/eps^2)) + k)   for sqrt(k) <= delta <= sqrt(k^2+k)
                     sqrt(8*ln(1/eps) + k)            for delta > sqrt(k^2+k)
  chernoff         delta = sqrt(-k * W_-1(-eps^(2/k) / e))

The Chernoff form uses the lower Lambert branch W_-1: the principal branch
would put delta^2 below the chi2_k mean k, inside the bulk of the clean
distribution, which is useless as an outlier threshold. At eps = 1 both
branches meet and delta^2 = k exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import NumericalError, TesdaError, ValidationError

BOUND_KINDS = ("chebyshev", "subexponential", "chernoff")
_INV_E = math.exp(-1.0)


@dataclass(frozen=True)
class ThresholdResult:
    delta: float
    delta_sq: float
    bound_kind: str
    branch_note: str = ""


@dataclass(frozen=True)
class BoundSpec:
    """Parameter bundle for threshold computation (CLI / config surface).

    Give either `epsilon` directly or a `target` ("fnr"/"fpr", rate) from
    which epsilon is derived; a target FNR of tau gives epsilon = 1 - tau
    (then use delta <= bound), a target FPR gives epsilon = tau (then use
    delta >= bound)."""

    kind: str
    k: int
    epsilon: float | None = None
    n: int | None = None            # required for chebyshev only
    target: tuple | None = None     # ("fnr" | "fpr", tau)

    def __post_init__(self):
        if self.kind not in BOUND_KINDS:
            raise ValidationError(f"unknown bound kind {self.kind!r}; expected one of {BOUND_KINDS}")
        if self.k < 1:
            raise ValidationError(f"dimension k must be >= 1, got {self.k}")
        if (self.epsilon is None) == (self.target is None):
            raise ValidationError("give exactly one of epsilon or target")
        if self.target is not None:
            kind, tau = self.target
            object.__setattr__(self, "epsilon", epsilon_for_target(kind, float(tau)))
        if not 0.0 < self.epsilon < 1.0:
            raise ValidationError(f"epsilon must be in (0, 1), got {self.epsilon}")

    def compute(self) -> ThresholdResult:
        if self.kind == "chebyshev":
            if self.n is None:
                raise ValidationError("chebyshev bound requires the training size n")
            return delta_chebyshev(self.k, self.n, self.epsilon)
        if self.kind == "subexponential":
            return delta_subexponential(self.k, self.epsilon)
        return delta_chernoff(self.k, self.epsilon)


def lambert_w_minus1(a: float) -> float:
    """Lower branch W_-1 of the Lambert W function on [-1/e, 0).

    Halley iteration from a branch-point series (near -1/e) or the
    asymptotic log-log guess, converged to |w*e^w - a| <= 1e-13*|a|.
    """
    if not -_INV_E <= a < 0.0:
        raise ValidationError(f"lambert_w_minus1 domain is [-1/e, 0), got {a}")
    # p = 0 exactly at the branch point where W = -1 and the iteration is 0/0
    p_sq = 2.0 * (1.0 + math.e * a)
    if p_sq <= 0.0:
        return -1.0
    if p_sq < 0.25:
        p = math.sqrt(p_sq)
        w = -1.0 - p - p_sq / 3.0 - 11.0 / 72.0 * p * p_sq
    else:
        la = math.log(-a)
        w = la - math.log(-la)
    tol = 1e-13 * abs(a)
    for _ in range(100):
        ew = math.exp(w)
        f = w * ew - a
        if abs(f) <= tol:
            return w
        fp = ew * (w + 1.0)
        fpp = ew * (w + 2.0)
        denom = fp - f * fpp / (2.0 * fp)
        w -= f / denom
    raise NumericalError(f"Lambert W_-1 iteration did not converge for a={a}")


def delta_chebyshev(k: int, n: int, epsilon: float) -> ThresholdResult:
    """Multivariate-Chebyshev threshold; defined only for eps > 2k/n."""
    _validate_k_eps(k, epsilon)
    if n < 2:
        raise ValidationError(f"training size n must be >= 2, got {n}")
    denom = epsilon * n * n - 2.0 * n * k
    if denom <= 0.0:
        raise ValidationError(
            f"chebyshev bound infeasible: need epsilon > 2k/n = {2.0 * k / n:.6g}, got {epsilon}"
        )
    delta_sq = k * (n * n - 4.0) / denom
    return ThresholdResult(math.sqrt(delta_sq), delta_sq, "chebyshev")


def delta_subexponential(k: int, epsilon: float) -> ThresholdResult:
    """Sub-exponential tail threshold, piecewise in delta's own range."""
    _validate_k_eps(k, epsilon)
    log_inv = math.log(1.0 / epsilon)
    delta_a = math.sqrt(4.0 * k * math.sqrt(2.0 * log_inv) + k)
    delta_b = math.sqrt(8.0 * log_inv + k)
    lo, hi = math.sqrt(k), math.sqrt(k * k + k)
    if lo <= delta_a <= hi:
        return ThresholdResult(delta_a, delta_a * delta_a, "subexponential",
                               f"moderate-deviation case: sqrt(k) <= delta <= {hi:.6g}")
    if delta_b > hi:
        return ThresholdResult(delta_b, delta_b * delta_b, "subexponential",
                               f"large-deviation case: delta > {hi:.6g}")
    # neither candidate lands in its own validity range; keep the one
    # closest to validity and say so
    viol_a = max(lo - delta_a, delta_a - hi)
    viol_b = hi - delta_b
    if viol_a <= viol_b:
        return ThresholdResult(delta_a, delta_a * delta_a, "subexponential",
                               f"warning: moderate-deviation case violated by {viol_a:.6g}")
    return ThresholdResult(delta_b, delta_b * delta_b, "subexponential",
                           f"warning: large-deviation case violated by {viol_b:.6g}")


def delta_chernoff(k: int, epsilon: float) -> ThresholdResult:
    """Chernoff threshold via the lower Lambert branch; delta^2 >= k always.

    The boundary eps = 1 is admitted: there a = -1/e and delta^2 = k.
    """
    if k < 1:
        raise ValidationError(f"dimension k must be >= 1, got {k}")
    if not 0.0 < epsilon <= 1.0:
        raise ValidationError(f"epsilon must be in (0, 1], got {epsilon}")
    a = -(epsilon ** (2.0 / k)) * _INV_E
    w = lambert_w_minus1(a)
    # defining identity check; the iteration already met a tighter tolerance
    if abs(w * math.exp(w) - a) > 1e-12 * abs(a):
        raise NumericalError(f"Lambert identity violated for a={a}")
    delta_sq = -k * w
    return ThresholdResult(math.sqrt(delta_sq), delta_sq, "chernoff",
                           f"W_-1({a:.6g}) = {w:.12g}")


def epsilon_for_target(kind: str, tau: float) -> float:
    """Contamination parameter hitting a target rate: epsilon = 1 - tau for
    an FNR target (then pick delta <= bound), epsilon = tau for an FPR
    target (then pick delta >= bound)."""
    if not 0.0 < tau < 1.0:
        raise ValidationError(f"target rate must be in (0, 1), got {tau}")
    if kind == "fnr":
        return 1.0 - tau
    if kind == "fpr":
        return tau
    raise ValidationError(f"unknown target kind {kind!r}; expected 'fnr' or 'fpr'")


def compare_bounds(k: int, n: int, epsilon: float) -> dict:
    """All three thresholds for one (k, n, epsilon); infeasible entries hold
    the error instead of a result."""
    table: dict[str, ThresholdResult | TesdaError] = {}
    for kind in BOUND_KINDS:
        try:
            table[kind] = BoundSpec(kind, k, epsilon, n).compute()
        except TesdaError as exc:
            table[kind] = exc
    che, sub, chn = (table[kind] for kind in BOUND_KINDS)
    if (isinstance(chn, ThresholdResult) and isinstance(sub, ThresholdResult)
            and epsilon <= 0.1 and k <= 32):
        if chn.delta > sub.delta * (1.0 + 1e-12):
            raise NumericalError("tightness ordering violated: chernoff > subexponential")
        if (isinstance(che, ThresholdResult) and n >= 10_000
                and chn.delta > che.delta * (1.0 + 1e-12)):
            raise NumericalError("tightness ordering violated: chernoff > chebyshev")
    return table


def _validate_k_eps(k: int, epsilon: float) -> None:
    if k < 1:
        raise ValidationError(f"dimension k must be >= 1, got {k}")
    if not 0.0 < epsilon < 1.0:
        raise ValidationError(f"epsilon must be in (0, 1), got {epsilon}")
