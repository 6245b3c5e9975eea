"""Parametric families used to model detector error distributions.

Every family exposes ``pdf``, ``logpdf``, ``cdf``, ``quantile`` and ``sample``.
Birnbaum-Saunders, Johnson SU and Normal have closed-form quantiles; Gamma and
Normal Inverse Gaussian are inverted numerically (safeguarded Newton on the CDF).
"""
from __future__ import annotations

import functools
import math
from dataclasses import asdict, dataclass
from typing import ClassVar

import numpy as np
from scipy import integrate
from scipy.special import gammainc, gammaln

from adrf.stats.special import SQRT2PI, log_bessel_k1, norm_cdf, norm_ppf


class ParameterError(ValueError):
    """Distribution parameters violate the family constraints."""


def _check_p(p):
    p = np.asarray(p, dtype=np.float64)
    if np.any((p <= 0.0) | (p >= 1.0)) or not np.isfinite(p).all():
        raise ValueError("quantile level must lie strictly inside (0, 1)")
    return p


def invert_cdf(cdf, p: float, lo: float, hi: float, xtol: float = 1e-12, max_iter: int = 400,
               pdf=None) -> float:
    """Solve ``cdf(x) = p`` for a non-decreasing ``cdf``.

    ``lo``/``hi`` are initial guesses; the bracket is widened geometrically
    until it contains the root. With ``pdf`` each step tries Newton first and
    falls back to bisection whenever Newton would leave the bracket.
    """
    width = max(hi - lo, 1e-12)
    while cdf(lo) > p:
        lo -= width
        width *= 2.0
    width = max(hi - lo, 1e-12)
    while cdf(hi) < p:
        hi += width
        width *= 2.0
    x = 0.5 * (lo + hi)
    for _ in range(max_iter):
        fx = cdf(x) - p
        if fx < 0:
            lo = x
        else:
            hi = x
        if fx == 0 or hi - lo <= xtol * max(1.0, abs(lo), abs(hi)):
            break
        nxt = 0.5 * (lo + hi)
        if pdf is not None:
            d = pdf(x)
            if d > 0:
                cand = x - fx / d
                if lo < cand < hi:
                    if abs(cand - x) <= xtol * max(1.0, abs(x)):
                        return cand
                    nxt = cand
        if nxt <= lo or nxt >= hi:
            break
        x = nxt
    return x


@dataclass(frozen=True)
class Distribution:
    family: ClassVar[str] = ""
    n_params: ClassVar[int] = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:  # pragma: no cover - overridden
        pass

    @property
    def params(self) -> dict:
        return asdict(self)

    def pdf(self, x):
        return np.exp(self.logpdf(x))

    def quantile(self, p):
        p = _check_p(p)
        if p.ndim == 0:
            return self._quantile_scalar(float(p))
        return np.array([self._quantile_scalar(float(v)) for v in p.ravel()]).reshape(p.shape)

    def _quantile_scalar(self, p: float) -> float:
        lo, hi = self._bracket()
        return invert_cdf(lambda v: float(self.cdf(v)), p, lo, hi)

    def _bracket(self) -> tuple[float, float]:
        raise NotImplementedError

    def support(self) -> tuple[float, float]:
        return -math.inf, math.inf

    def pdf_mass(self, pieces: int = 40) -> float:
        """Numerical integral of the pdf over the support.

        The central bracket is split into ``pieces`` panels so that narrow
        peaks far from the support boundary are not missed.
        """
        lo, hi = self.support()
        a, b = self._bracket()
        a, b = max(a, lo), min(b, hi)
        f = lambda v: float(self.pdf(v))  # noqa: E731
        edges = np.linspace(a, b, pieces + 1)
        total = sum(integrate.quad(f, u, v, limit=100)[0] for u, v in zip(edges[:-1], edges[1:]))
        if lo < a:
            total += integrate.quad(f, lo, a, limit=200)[0]
        if b < hi:
            total += integrate.quad(f, b, hi, limit=200)[0]
        return total

    def describe(self) -> str:
        vals = ", ".join(f"{k}={v:.6g}" for k, v in self.params.items())
        return f"{self.family}({vals})"


@dataclass(frozen=True)
class Normal(Distribution):
    mu: float
    sigma: float
    family: ClassVar[str] = "normal"
    n_params: ClassVar[int] = 2

    def validate(self):
        if not self.sigma > 0:
            raise ParameterError("normal sigma must be positive")

    def logpdf(self, x):
        z = (np.asarray(x, dtype=np.float64) - self.mu) / self.sigma
        return -0.5 * z * z - math.log(SQRT2PI * self.sigma)

    def cdf(self, x):
        return norm_cdf((np.asarray(x, dtype=np.float64) - self.mu) / self.sigma)

    def quantile(self, p):
        return self.mu + self.sigma * norm_ppf(_check_p(p))

    def _bracket(self):
        return self.mu - 10 * self.sigma, self.mu + 10 * self.sigma

    def sample(self, n, rng):
        return rng.normal(self.mu, self.sigma, size=n)


@dataclass(frozen=True)
class Gamma(Distribution):
    k: float
    loc: float
    scale: float
    family: ClassVar[str] = "gamma"
    n_params: ClassVar[int] = 3

    def validate(self):
        if not (self.k > 0 and self.scale > 0):
            raise ParameterError("gamma shape and scale must be positive")

    def support(self):
        return self.loc, math.inf

    def logpdf(self, x):
        z = (np.asarray(x, dtype=np.float64) - self.loc) / self.scale
        with np.errstate(divide="ignore", invalid="ignore"):
            out = (self.k - 1.0) * np.log(z) - z - gammaln(self.k) - math.log(self.scale)
        return np.where(z > 0, out, -np.inf)

    def cdf(self, x):
        z = (np.asarray(x, dtype=np.float64) - self.loc) / self.scale
        return gammainc(self.k, np.maximum(z, 0.0))

    def _bracket(self):
        m, s = self.k * self.scale, math.sqrt(self.k) * self.scale
        return max(self.loc, self.loc + m - 10 * s), self.loc + m + 10 * s

    def sample(self, n, rng):
        return self.loc + rng.gamma(self.k, self.scale, size=n)


@dataclass(frozen=True)
class BirnbaumSaunders(Distribution):
    """Fatigue-life distribution: ``(sqrt(z) - 1/sqrt(z)) / c`` is standard normal."""

    c: float
    loc: float
    scale: float
    family: ClassVar[str] = "birnbaum_saunders"
    n_params: ClassVar[int] = 3

    def validate(self):
        if not (self.c > 0 and self.scale > 0):
            raise ParameterError("Birnbaum-Saunders c and scale must be positive")

    def support(self):
        return self.loc, math.inf

    def logpdf(self, x):
        z = (np.asarray(x, dtype=np.float64) - self.loc) / self.scale
        c = self.c
        with np.errstate(divide="ignore", invalid="ignore"):
            out = (
                np.log(z + 1.0)
                - math.log(2.0 * c * SQRT2PI)
                - 1.5 * np.log(z)
                - (z - 1.0) ** 2 / (2.0 * z * c * c)
                - math.log(self.scale)
            )
        return np.where(z > 0, out, -np.inf)

    def cdf(self, x):
        z = (np.asarray(x, dtype=np.float64) - self.loc) / self.scale
        zp = np.maximum(z, 1e-300)
        out = norm_cdf((np.sqrt(zp) - 1.0 / np.sqrt(zp)) / self.c)
        return np.where(z > 0, out, 0.0)

    def _from_normal(self, zn):
        cz = self.c * zn
        return self.loc + self.scale * 0.25 * (cz + np.sqrt(cz * cz + 4.0)) ** 2

    def quantile(self, p):
        return self._from_normal(norm_ppf(_check_p(p)))

    def _bracket(self):
        return float(self.quantile(1e-4)), float(self.quantile(1 - 1e-4))

    def sample(self, n, rng):
        return self._from_normal(rng.standard_normal(n))


@dataclass(frozen=True)
class JohnsonSU(Distribution):
    """``a + b * asinh((x - loc) / scale)`` is standard normal."""

    a: float
    b: float
    loc: float
    scale: float
    family: ClassVar[str] = "johnson_su"
    n_params: ClassVar[int] = 4

    def validate(self):
        if not (self.b > 0 and self.scale > 0):
            raise ParameterError("Johnson SU b and scale must be positive")

    def logpdf(self, x):
        z = (np.asarray(x, dtype=np.float64) - self.loc) / self.scale
        w = self.a + self.b * np.arcsinh(z)
        return (
            math.log(self.b / (SQRT2PI * self.scale))
            - 0.5 * np.log1p(z * z)
            - 0.5 * w * w
        )

    def cdf(self, x):
        z = (np.asarray(x, dtype=np.float64) - self.loc) / self.scale
        return norm_cdf(self.a + self.b * np.arcsinh(z))

    def _from_normal(self, zn):
        return self.loc + self.scale * np.sinh((zn - self.a) / self.b)

    def quantile(self, p):
        return self._from_normal(norm_ppf(_check_p(p)))

    def _bracket(self):
        return float(self.quantile(1e-4)), float(self.quantile(1 - 1e-4))

    def sample(self, n, rng):
        return self._from_normal(rng.standard_normal(n))


@dataclass(frozen=True)
class NormalInverseGaussian(Distribution):
    """NIG with tail heaviness ``a``, asymmetry ``b`` (|b| < a), location and scale.

    Standardized density: ``a K1(a s) exp(sqrt(a^2 - b^2) + b z) / (pi s)``
    with ``s = sqrt(1 + z^2)``.
    """

    a: float
    b: float
    loc: float
    scale: float
    family: ClassVar[str] = "normal_inverse_gaussian"
    n_params: ClassVar[int] = 4
    _SEGMENT_SD: ClassVar[float] = 0.25

    def validate(self):
        if not (self.a > 0 and self.scale > 0 and abs(self.b) < self.a):
            raise ParameterError("NIG needs a > 0, scale > 0 and |b| < a")

    @property
    def gamma(self) -> float:
        return math.sqrt(self.a * self.a - self.b * self.b)

    def _std_moments(self):
        g = self.gamma
        return self.b / g, math.sqrt(self.a * self.a / g**3)

    def _logpdf_std(self, z):
        s = np.sqrt(1.0 + z * z)
        return (
            math.log(self.a / math.pi)
            + log_bessel_k1(self.a * s)
            - np.log(s)
            + self.gamma
            + self.b * z
        )

    def logpdf(self, x):
        z = (np.asarray(x, dtype=np.float64) - self.loc) / self.scale
        return self._logpdf_std(z) - math.log(self.scale)

    def _pdf_std(self, z):
        return np.exp(self._logpdf_std(np.asarray(z, dtype=np.float64)))

    @functools.cached_property
    def _anchor(self) -> tuple[float, float]:
        """A point left of the bulk and the (adaptively integrated) mass below it."""
        mean, sd = self._std_moments()
        anchor = mean - sd
        f = lambda v: float(self._pdf_std(v))  # noqa: E731
        return anchor, integrate.quad(f, -np.inf, anchor, limit=400, epsabs=1e-14, epsrel=1e-12)[0]

    def _panels(self, lo: np.ndarray, hi: np.ndarray, tol: float = 1e-13, max_depth: int = 40) -> np.ndarray:
        """Integral of the standardized pdf over each [lo, hi] by Gauss-Legendre panels.

        A panel is bisected until its two halves agree with the whole; very
        skewed fits rise too steeply for fixed-width panels.
        """
        _, sd = self._std_moments()
        max_w = self._SEGMENT_SD * sd
        pieces = np.maximum(np.ceil((hi - lo) / max_w).astype(int), 1)
        seg = np.repeat(np.arange(lo.size), pieces)
        frac = np.concatenate([np.arange(k) for k in pieces]) if pieces.size else np.zeros(0)
        step = (hi - lo)[seg] / pieces[seg]
        a = lo[seg] + frac * step
        nodes, weights = np.polynomial.legendre.leggauss(10)

        def gl(start, width):
            pts = start[:, None] + 0.5 * width[:, None] * (nodes[None, :] + 1.0)
            return self._pdf_std(pts) @ weights * 0.5 * width

        out = np.zeros(lo.size)
        whole = gl(a, step)
        for _ in range(max_depth):
            half = 0.5 * step
            left, right = gl(a, half), gl(a + half, half)
            done = np.abs(left + right - whole) <= tol
            out += np.bincount(seg[done], weights=(left + right)[done], minlength=lo.size)
            keep = ~done
            if not keep.any():
                return out
            seg = np.repeat(seg[keep], 2)
            a = np.stack([a[keep], a[keep] + half[keep]], axis=1).ravel()
            whole = np.stack([left[keep], right[keep]], axis=1).ravel()
            step = np.repeat(half[keep], 2)
        return out + np.bincount(seg, weights=whole, minlength=lo.size)

    def _cdf_std_sorted(self, z: np.ndarray) -> np.ndarray:
        """CDF at ascending standardized points: cached mass up to the anchor,
        then Gauss-Legendre panels between consecutive points. Points left of
        the anchor are integrated adaptively from -inf."""
        anchor, below = self._anchor
        if z[0] < anchor:
            f = lambda v: float(self._pdf_std(v))  # noqa: E731
            head = integrate.quad(f, -np.inf, float(z[0]), limit=400, epsabs=1e-14, epsrel=1e-12)[0]
        else:
            head = below + self._panels(np.array([anchor]), z[:1])[0]
        if z.size == 1:
            return np.array([head])
        return np.concatenate([[head], head + np.cumsum(self._panels(z[:-1], z[1:]))])

    def _quantile_scalar(self, p: float) -> float:
        lo, hi = self._bracket()
        return invert_cdf(lambda v: float(self.cdf(v)), p, lo, hi, pdf=lambda v: float(self.pdf(v)))

    def cdf(self, x):
        x = np.asarray(x, dtype=np.float64)
        z = ((x - self.loc) / self.scale).ravel()
        order = np.argsort(z, kind="stable")
        out = np.empty_like(z)
        out[order] = self._cdf_std_sorted(z[order])
        out = np.clip(out, 0.0, 1.0)
        return out.reshape(x.shape) if x.ndim else float(out[0])

    def _bracket(self):
        mean, sd = self._std_moments()
        return self.loc + self.scale * (mean - 3 * sd), self.loc + self.scale * (mean + 3 * sd)

    def sample(self, n, rng):
        g = self.gamma
        v = rng.wald(1.0 / g, 1.0, size=n)
        z = self.b * v + np.sqrt(v) * rng.standard_normal(n)
        return self.loc + self.scale * z


FAMILIES: dict[str, type[Distribution]] = {
    cls.family: cls
    for cls in (BirnbaumSaunders, JohnsonSU, NormalInverseGaussian, Normal, Gamma)
}

#: Fixed ordering used to break ties between equally good fits.
FAMILY_ORDER = tuple(FAMILIES)

ALIASES = {
    "bs": "birnbaum_saunders",
    "fatiguelife": "birnbaum_saunders",
    "jsu": "johnson_su",
    "johnsonsu": "johnson_su",
    "nig": "normal_inverse_gaussian",
    "norminvgauss": "normal_inverse_gaussian",
    "norm": "normal",
}


def family_class(name: str) -> type[Distribution]:
    key = ALIASES.get(name.lower(), name.lower())
    try:
        return FAMILIES[key]
    except KeyError:
        raise ValueError(f"unknown distribution family {name!r}; choose from {sorted(FAMILIES)}") from None


def make(name: str, **params) -> Distribution:
    return family_class(name)(**params)
