"""Special functions, the CAM/RR computational-time ratio, and KS statistics.

The incomplete gamma routines follow the usual split: power series below
``t = w + 1`` and a modified-Lentz continued fraction for the upper tail
above it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InvalidInput, NoRoot

_EPS = 1e-16
_TINY = 1e-300
_MAX_TERMS = 10_000

KS_COEFF_95 = 1.36


def _series_sum(w: float, t: float) -> float:
    """sum_{k>=0} t^k / (w (w+1) ... (w+k))."""
    term = 1.0 / w
    total = term
    ap = w
    for _ in range(_MAX_TERMS):
        ap += 1.0
        term *= t / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            return total
    raise ArithmeticError(f"incomplete gamma series did not converge (w={w}, t={t})")


def _upper_cf(w: float, t: float) -> float:
    """Continued fraction for Gamma(w, t) * e^t * t^-w."""
    b = t + 1.0 - w
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_TERMS):
        an = -i * (i - w)
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
            return h
    raise ArithmeticError(f"incomplete gamma continued fraction did not converge (w={w}, t={t})")


def _check_domain(w: float, t: float) -> None:
    if not (w > 0.0) or math.isnan(t) or t < 0.0:
        raise InvalidInput(f"incomplete gamma needs w > 0 and t >= 0, got w={w}, t={t}")


def regularized_lower_gamma(w: float, t: float) -> float:
    """P(w, t) = gamma(w, t) / Gamma(w)."""
    _check_domain(w, t)
    if t == 0.0:
        return 0.0
    if math.isinf(t):
        return 1.0
    log_pref = -t + w * math.log(t) - math.lgamma(w)
    if t < w + 1.0:
        return min(1.0, math.exp(log_pref) * _series_sum(w, t))
    return max(0.0, 1.0 - math.exp(log_pref) * _upper_cf(w, t))


def lower_incomplete_gamma(w: float, t: float) -> float:
    """gamma(w, t) = integral_0^t x^(w-1) e^-x dx."""
    _check_domain(w, t)
    if t == 0.0:
        return 0.0
    if math.isinf(t):
        return math.gamma(w)
    if t < w + 1.0:
        return math.exp(-t + w * math.log(t)) * _series_sum(w, t)
    upper = math.exp(-t + w * math.log(t)) * _upper_cf(w, t)
    return math.gamma(w) - upper


def scaled_lower_gamma(w: float, t: float) -> float:
    """gamma(w, t) * e^t / t^w; equals 1/w at t = 0 and increases in t."""
    _check_domain(w, t)
    if t < w + 1.0:
        return _series_sum(w, t)
    log_upper = math.log(_upper_cf(w, t))
    log_full = math.lgamma(w) + t - w * math.log(t)
    try:
        return math.exp(log_full) - math.exp(log_upper)
    except OverflowError:
        return math.inf


def _elementwise(fn, x):
    if np.ndim(x) == 0:
        return fn(float(x))
    arr = np.asarray(x, dtype=np.float64)
    return np.fromiter((fn(v) for v in arr.ravel()), dtype=np.float64, count=arr.size).reshape(arr.shape)


def _check_df(df) -> None:
    if not (df > 0):
        raise InvalidInput(f"degrees of freedom must be positive, got {df}")


def chi2_cdf(df: float, x):
    """Chi-square CDF; accepts a scalar or an array for ``x``."""
    _check_df(df)

    def one(v: float) -> float:
        if v < 0.0 or math.isnan(v):
            raise InvalidInput(f"chi-square CDF needs x >= 0, got {v}")
        return regularized_lower_gamma(df / 2.0, v / 2.0)

    return _elementwise(one, x)


def chi2_pdf(df: float, x: float) -> float:
    _check_df(df)
    if x <= 0.0:
        if df == 2:
            return 0.5
        return math.inf if df < 2 else 0.0
    k = df / 2.0
    return math.exp((k - 1.0) * math.log(x) - x / 2.0 - k * math.log(2.0) - math.lgamma(k))


def chi2_truncated_cdf(df: float, upper: float, x):
    """CDF of a chi-square variable conditioned on being below ``upper``."""
    if math.isinf(upper):
        return chi2_cdf(df, x)
    mass = chi2_cdf(df, upper)
    if mass <= 0.0:
        raise InvalidInput(f"truncation point {upper} carries no probability")

    def one(v: float) -> float:
        return 1.0 if v >= upper else chi2_cdf(df, v) / mass

    return _elementwise(one, x)


def chi2_quantile(df: float, prob: float) -> float:
    """Inverse chi-square CDF: bracketed bisection, then Newton polish."""
    _check_df(df)
    if not (0.0 < prob < 1.0):
        raise InvalidInput(f"probability must lie in (0, 1), got {prob}")
    lo, hi = 0.0, max(1.0, float(df))
    while chi2_cdf(df, hi) < prob:
        lo, hi = hi, 2.0 * hi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if chi2_cdf(df, mid) < prob:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-8 * hi:
            break
    x = 0.5 * (lo + hi)
    for _ in range(20):
        f = chi2_cdf(df, x) - prob
        dens = chi2_pdf(df, x)
        if f == 0.0 or not (dens > 0.0) or math.isinf(dens):
            break
        step = f / dens
        nxt = x - step
        if not (lo <= nxt <= hi):
            break
        x = nxt
        if abs(step) <= 1e-15 * max(x, _TINY):
            break
    return x


@dataclass(frozen=True)
class TimeRatioParams:
    """Constants of the CAM vs rerandomization cost comparison.

    ``C`` is CAM's per-unit, per-covariate time, ``R`` complete
    randomization's per-unit time, ``D`` the constant in the break-even
    threshold equation.
    """

    n: float
    p: int
    C: float = 10.0
    R: float = 1.0
    D: float = 5.0

    def __post_init__(self):
        for name in ("C", "R", "D"):
            v = getattr(self, name)
            if not (v > 0.0) or math.isinf(v):
                raise InvalidInput(f"{name} must be a positive finite number, got {v}")
        if not (self.n >= 2):
            raise InvalidInput(f"n must be >= 2, got {self.n}")
        if not (self.p >= 1):
            raise InvalidInput(f"p must be >= 1, got {self.p}")


@dataclass(frozen=True)
class AStarSolution:
    a_star: float
    residual: float
    iterations: int


def a_star_residual(params: TimeRatioParams, a: float) -> float:
    """``gamma(p/2, a/2) D p - 2 gamma(p/2 + 1, a/2) n``."""
    w = params.p / 2.0
    t = a / 2.0
    return (lower_incomplete_gamma(w, t) * params.D * params.p
            - 2.0 * lower_incomplete_gamma(w + 1.0, t) * params.n)


def solve_a_star(params: TimeRatioParams, upper_limit: float = 1e6) -> AStarSolution:
    """Positive root of the break-even threshold equation.

    Using gamma(w+1, t) = w gamma(w, t) - t^w e^-t, the residual divided by
    the positive factor t^w e^-t is ``S(t) p (D - n) + 2n`` where
    ``S = scaled_lower_gamma(p/2, t)``. Bisection runs on that form: same sign,
    same root, no cancellation between two tiny incomplete gamma values.
    """
    w = params.p / 2.0
    n, p, D = float(params.n), float(params.p), params.D

    def g(a: float) -> float:
        return scaled_lower_gamma(w, a / 2.0) * p * (D - n) + 2.0 * n

    # g(0) = 2D > 0; g turns negative eventually only when n > D
    if n <= D:
        raise NoRoot(f"no positive root for n={params.n} <= D={params.D}")
    lo, hi = 0.0, 1.0
    while g(hi) > 0.0:
        lo, hi = hi, 2.0 * hi
        if hi > upper_limit:
            raise NoRoot(
                f"residual keeps its sign up to a = {upper_limit:g} "
                f"(n={params.n}, p={params.p}, D={params.D}); a root needs n > D"
            )
    it = 0
    while it < 2000:
        it += 1
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if g(mid) > 0.0:
            lo = mid
        else:
            hi = mid
    a = 0.5 * (lo + hi)
    return AStarSolution(a_star=a, residual=a_star_residual(params, a), iterations=it)


def time_ratio(params: TimeRatioParams) -> float:
    """CAM-to-rerandomization time ratio ``F_p(a*) C p / R``."""
    a = solve_a_star(params).a_star
    return float(chi2_cdf(params.p, a)) * params.C * params.p / params.R


def time_ratio_grid(ns, ps, C: float = 10.0, R: float = 1.0, D: float = 5.0) -> dict:
    """Ratio for every (n, p); cells without a root map to ``None``."""
    out = {}
    for n in ns:
        for p in ps:
            try:
                out[(n, p)] = time_ratio(TimeRatioParams(n=n, p=p, C=C, R=R, D=D))
            except NoRoot:
                out[(n, p)] = None
    return out


def ks_statistic(samples, cdf: Callable) -> float:
    """Two-sided one-sample Kolmogorov-Smirnov distance to ``cdf``."""
    x = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    m = x.size
    if m == 0:
        raise InvalidInput("no samples")
    F = np.asarray(cdf(x), dtype=np.float64)
    i = np.arange(1, m + 1)
    d_plus = np.max(i / m - F)
    d_minus = np.max(F - (i - 1) / m)
    return float(max(d_plus, d_minus))


def ks_critical(m: int, coeff: float = KS_COEFF_95) -> float:
    """Asymptotic 5% critical value ``1.36 / sqrt(m)``."""
    return coeff / math.sqrt(m)
