"""Special functions: normal CDF/quantile and the modified Bessel function K1."""
from __future__ import annotations

import math

import numpy as np
from scipy.special import log_ndtr, ndtr

SQRT2PI = math.sqrt(2.0 * math.pi)
EULER_GAMMA = 0.5772156649015329

# Acklam's rational approximation to the normal quantile (|rel err| < 1.2e-9).
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def norm_cdf(x):
    return ndtr(x)


def norm_logcdf(x):
    return log_ndtr(x)


def norm_pdf(x):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-0.5 * x * x) / SQRT2PI


def _acklam_lower(p: np.ndarray) -> np.ndarray:
    """Initial quantile for p <= 0.5."""
    z = np.empty_like(p)
    tail = p < _P_LOW
    if tail.any():
        q = np.sqrt(-2.0 * np.log(p[tail]))
        num = ((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]
        den = (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0
        z[tail] = num / den
    mid = ~tail
    if mid.any():
        q = p[mid] - 0.5
        r = q * q
        num = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
        den = ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0
        z[mid] = num / den
    return z


def norm_ppf(p):
    """Standard normal quantile: rational approximation plus one Newton step.

    The upper half is evaluated through the lower tail (``q = 1 - p`` is exact
    there) so extreme quantiles keep their relative accuracy.
    """
    p = np.asarray(p, dtype=np.float64)
    scalar = p.ndim == 0
    p = np.atleast_1d(p)
    if np.any((p <= 0.0) | (p >= 1.0) | ~np.isfinite(p)):
        raise ValueError("normal quantile needs p strictly inside (0, 1)")
    upper = p > 0.5
    q = np.where(upper, 1.0 - p, p)
    z = _acklam_lower(q)
    # Newton (Halley-free) refinement on the lower-tail CDF.
    err = ndtr(z) - q
    z = z - err / norm_pdf(z)
    z = np.where(upper, -z, z)
    return float(z[0]) if scalar else z


# ---------------------------------------------------------------- Bessel K1

_SERIES_MAX = 2.0
_ASYMPTOTIC_MIN = 25.0
# Trapezoid on a doubly-decaying analytic integrand: error ~ exp(x - pi^2 / h).
_TRAP_H = 0.1
_TRAP_T = np.arange(0.0, 4.0 + _TRAP_H / 2, _TRAP_H)
_TRAP_W = np.full(_TRAP_T.size, _TRAP_H)
_TRAP_W[0] = 0.5 * _TRAP_H


def _k1_series(x: np.ndarray) -> np.ndarray:
    """K1 by its power series about 0 (accurate for x <= 2)."""
    y = 0.25 * x * x
    i1 = np.zeros_like(x)
    tail = np.zeros_like(x)
    term = 0.5 * x  # (x/2)^(2k+1) / (k! (k+1)!) at k = 0
    psi_k1 = -EULER_GAMMA  # digamma(k + 1)
    psi_k2 = 1.0 - EULER_GAMMA  # digamma(k + 2)
    for k in range(30):
        i1 += term
        tail += (psi_k1 + psi_k2) * term
        term = term * y / ((k + 1) * (k + 2))
        psi_k1 += 1.0 / (k + 1)
        psi_k2 += 1.0 / (k + 2)
    return 1.0 / x + np.log(0.5 * x) * i1 - 0.5 * tail


def _k1e_trapezoid(x: np.ndarray) -> np.ndarray:
    """exp(x) K1(x) from the integral of exp(-x (cosh t - 1)) cosh t over t >= 0."""
    ch = np.cosh(_TRAP_T)
    expo = -np.outer(x, ch - 1.0)
    return np.exp(expo) @ (ch * _TRAP_W)


# Coefficients of the large-x expansion exp(x) K1(x) ~ sqrt(pi/2x) sum_k c_k x^-k.
_ASYM_C = [1.0]
for _k in range(1, 26):
    _ASYM_C.append(_ASYM_C[-1] * (4.0 - (2 * _k - 1) ** 2) / (8.0 * _k))
_ASYM_C = np.array(_ASYM_C)


def _k1e_asymptotic(x: np.ndarray) -> np.ndarray:
    # Drop terms that are below double precision at the smallest argument.
    xmin = float(x.min())
    mags = np.abs(_ASYM_C) / xmin ** np.arange(_ASYM_C.size)
    n = int(np.nonzero(mags > 1e-17)[0][-1]) + 1
    inv = 1.0 / x
    total = np.full_like(x, _ASYM_C[n - 1])
    for c in _ASYM_C[n - 2 :: -1]:
        total = total * inv + c
    return np.sqrt(np.pi / (2.0 * x)) * total


def bessel_k1e(x):
    """Exponentially scaled modified Bessel function ``exp(x) * K1(x)`` for x > 0."""
    x = np.asarray(x, dtype=np.float64)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    if np.any(x <= 0.0) or not np.isfinite(x).all():
        raise ValueError("K1 is only defined here for finite x > 0")
    out = np.empty_like(x)
    small = x <= _SERIES_MAX
    large = x >= _ASYMPTOTIC_MIN
    mid = ~small & ~large
    if small.any():
        out[small] = _k1_series(x[small]) * np.exp(x[small])
    if mid.any():
        out[mid] = _k1e_trapezoid(x[mid])
    if large.any():
        out[large] = _k1e_asymptotic(x[large])
    return float(out[0]) if scalar else out


def bessel_k1(x):
    x = np.asarray(x, dtype=np.float64)
    return bessel_k1e(x) * np.exp(-x)


def log_bessel_k1(x):
    x = np.asarray(x, dtype=np.float64)
    return np.log(bessel_k1e(x)) - x
