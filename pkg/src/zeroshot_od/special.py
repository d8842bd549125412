"""Special functions: regularized incomplete gamma, chi-square quantile and
the inverse standard-normal CDF."""

from __future__ import annotations

import math

import numpy as np

_EPS = 1e-16
_TINY = 1e-300
_MAX_ITER = 10_000


def _gamma_series(a: float, x: float) -> float:
    # P(a, x) by the power series; converges fast for x < a + 1.
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_contfrac(a: float, x: float) -> float:
    # Q(a, x) by the modified Lentz continued fraction; for x >= a + 1.
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
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
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def gammainc_pq(a: float, x: float) -> tuple[float, float]:
    """Return ``(P(a, x), Q(a, x))``, the regularized lower and upper
    incomplete gamma functions, each computed on its accurate side."""
    if a <= 0:
        raise ValueError("a must be positive")
    if x < 0:
        raise ValueError("x must be non-negative")
    if x == 0:
        return 0.0, 1.0
    if x < a + 1.0:
        p = _gamma_series(a, x)
        return p, 1.0 - p
    q = _gamma_contfrac(a, x)
    return 1.0 - q, q


def chi2_cdf(t: float, dof: int) -> float:
    if t <= 0:
        return 0.0
    return gammainc_pq(dof / 2.0, t / 2.0)[0]


def _chi2_logpdf(t: float, dof: int) -> float:
    k = dof / 2.0
    return (k - 1.0) * math.log(t) - t / 2.0 - k * math.log(2.0) - math.lgamma(k)


def chi2_quantile(dof: int, prob: float) -> float:
    """Threshold ``t`` with ``P(X <= t) = prob`` for ``X ~ chi2(dof)``.

    Safeguarded Newton iteration on whichever tail is the smaller one, so
    the result stays accurate for ``prob`` near 0 or 1.
    """
    if int(dof) != dof or dof < 1:
        raise ValueError(f"dof must be an integer >= 1, got {dof}")
    if not 0.0 < prob < 1.0:
        raise ValueError(f"prob must lie in (0, 1), got {prob}")
    dof = int(dof)
    upper = prob > 0.5
    target = 1.0 - prob if upper else prob

    def resid(t: float) -> float:
        p, q = gammainc_pq(dof / 2.0, t / 2.0)
        return (target - q) if upper else (p - target)

    # Wilson-Hilferty starting point.
    z = float(ndtri(np.array([prob]))[0])
    c = 2.0 / (9.0 * dof)
    t = dof * max(1.0 - c + z * math.sqrt(c), 1e-3) ** 3

    lo, hi = 0.0, max(t, 1.0)
    while resid(hi) < 0:
        hi *= 2.0
    t = min(max(t, lo), hi)
    for _ in range(200):
        r = resid(t)
        if r == 0:
            return t
        if r < 0:
            lo = t
        else:
            hi = t
        # resid is increasing in t with slope equal to the pdf in both branches.
        slope = math.exp(_chi2_logpdf(t, dof)) if t > 0 else 0.0
        step_ok = slope > 0
        if step_ok:
            nxt = t - r / slope
            step_ok = lo < nxt < hi
        if not step_ok:
            nxt = 0.5 * (lo + hi)
        if abs(nxt - t) <= 1e-15 * max(abs(t), 1e-300) or hi - lo <= 1e-15 * hi:
            return nxt
        t = nxt
    return t


# Acklam's rational approximation; relative error below 1.15e-9.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def _tail(q):
    return (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / (
        (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0
    )


def ndtri(p: np.ndarray) -> np.ndarray:
    """Inverse standard-normal CDF, elementwise.  ``p`` outside ``(0, 1)``
    maps to ``-inf``/``+inf`` at the boundaries."""
    p = np.asarray(p, dtype=np.float64)
    out = np.empty_like(p)
    low = p < _P_LOW
    high = p > 1.0 - _P_LOW
    mid = ~(low | high)

    q = p[mid] - 0.5
    r = q * q
    out[mid] = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / (
        ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0
    )
    with np.errstate(divide="ignore", invalid="ignore"):
        pl = p[low]
        out[low] = np.where(pl > 0, _tail(np.sqrt(-2.0 * np.log(np.where(pl > 0, pl, 1.0)))), -np.inf)
        ph = p[high]
        qh = 1.0 - ph
        out[high] = np.where(qh > 0, -_tail(np.sqrt(-2.0 * np.log(np.where(qh > 0, qh, 1.0)))), np.inf)
    return out
