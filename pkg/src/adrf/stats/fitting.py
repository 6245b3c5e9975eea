"""Maximum-likelihood fitting, Kolmogorov-Smirnov selection and thresholds."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import minimize

from adrf.stats.distributions import (
    FAMILY_ORDER,
    BirnbaumSaunders,
    Distribution,
    Gamma,
    JohnsonSU,
    Normal,
    NormalInverseGaussian,
    ParameterError,
    family_class,
)

log = logging.getLogger(__name__)

MIN_SAMPLES = 30


class FitError(RuntimeError):
    """A family could not be fitted to the samples."""


class DegenerateSamplesError(FitError):
    """Samples have (numerically) zero spread."""


@dataclass(frozen=True)
class ErrorDistributionModel:
    dist: Distribution
    ks: float
    n: int

    @property
    def family(self) -> str:
        return self.dist.family

    def quantile(self, p):
        return self.dist.quantile(p)

    def cdf(self, x):
        return self.dist.cdf(x)


def ks_statistic(samples, dist) -> float:
    """Two-sided KS distance between the empirical CDF and ``dist``.

    ``dist`` is a Distribution or any vectorized CDF callable.
    """
    x = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    n = x.size
    if n == 0:
        raise ValueError("KS statistic needs at least one sample")
    cdf = dist.cdf if hasattr(dist, "cdf") else dist
    F = np.asarray(cdf(x), dtype=np.float64)
    i = np.arange(1, n + 1)
    return float(np.max(np.maximum(np.abs(i / n - F), np.abs((i - 1) / n - F))))


# ---------------------------------------------------------------- per-family MLE


def _margin(x: np.ndarray) -> float:
    return 1e-6 * max(float(np.ptp(x)), 1e-300)


def _softlog(v: float) -> float:
    return math.log(max(v, 1e-300))


class _Spec:
    """Unconstrained parameterization of one family for simplex search.

    Each family is walled off (infinite NLL) in the direction where it
    degenerates into a normal distribution. Near-normal data then converges
    against the wall instead of drifting, and the tie band in
    :func:`select_best_fit` hands the choice to the Normal family.
    """

    def __init__(self, x):
        self.x = x
        self.xmin = float(x.min())
        self.mean = float(x.mean())
        self.sd = float(x.std())

    def starts(self) -> list[np.ndarray]:
        raise NotImplementedError

    def build(self, theta) -> Distribution:
        raise NotImplementedError


class _GammaSpec(_Spec):
    def build(self, th):
        if th[0] > 10.0:
            raise ParameterError("gamma shape beyond the normal-limit bound")
        return Gamma(k=math.exp(th[0]), loc=self.xmin - _margin(self.x) - math.exp(th[2]),
                     scale=math.exp(th[1]))

    def starts(self):
        out = []
        for gap in (0.05 * self.sd, 0.5 * self.sd):
            z = self.x - (self.xmin - gap)
            m, v = z.mean(), z.var()
            out.append(np.array([_softlog(m * m / v), _softlog(v / m), _softlog(gap)]))
        return out


class _BSSpec(_Spec):
    def build(self, th):
        if th[0] < -6.0:
            raise ParameterError("BS shape below the normal-limit bound")
        return BirnbaumSaunders(c=math.exp(th[0]), loc=self.xmin - _margin(self.x) - math.exp(th[2]),
                                scale=math.exp(th[1]))

    def starts(self):
        out = []
        for gap in (0.01 * self.sd, 0.2 * self.sd):
            z = self.x - (self.xmin - gap)
            s = z.mean()
            r = 1.0 / np.mean(1.0 / z)
            c = math.sqrt(max(2.0 * (math.sqrt(s / r) - 1.0), 1e-6))
            out.append(np.array([_softlog(c), _softlog(math.sqrt(s * r)), _softlog(gap)]))
        return out


class _JSUSpec(_Spec):
    def build(self, th):
        if th[1] > 3.5 or abs(th[0]) > 40.0:
            raise ParameterError("JSU search left the bounded region")
        return JohnsonSU(a=th[0], b=math.exp(th[1]), loc=th[2], scale=math.exp(th[3]))

    def starts(self):
        med = float(np.median(self.x))
        skew = float(np.mean((self.x - self.mean) ** 3) / self.sd**3)
        return [
            np.array([0.0, 0.0, med, _softlog(self.sd)]),
            np.array([-np.clip(skew, -3, 3), 0.0, med, _softlog(0.5 * self.sd)]),
        ]


class _NIGSpec(_Spec):
    def build(self, th):
        if abs(th[1]) > 8.0 or not -12.0 <= th[0] <= 8.0:
            raise ParameterError("NIG search left the bounded region")
        a = math.exp(th[0])
        return NormalInverseGaussian(a=a, b=a * math.tanh(th[1]), loc=th[2], scale=math.exp(th[3]))

    def starts(self):
        skew = float(np.mean((self.x - self.mean) ** 3) / self.sd**3)
        out = []
        for a in (1.0, 4.0):
            b = float(np.clip(skew * a / 3.0, -0.8 * a, 0.8 * a))
            g = math.sqrt(a * a - b * b)
            scale = self.sd / math.sqrt(a * a / g**3)
            loc = self.mean - scale * b / g
            out.append(np.array([math.log(a), math.atanh(b / a), loc, _softlog(scale)]))
        return out


_SPECS = {
    "gamma": _GammaSpec,
    "birnbaum_saunders": _BSSpec,
    "johnson_su": _JSUSpec,
    "normal_inverse_gaussian": _NIGSpec,
}


def _mean_nll(spec: _Spec, th) -> float:
    try:
        d = spec.build(th)
    except (ParameterError, OverflowError, ValueError):
        return math.inf
    with np.errstate(all="ignore"):
        ll = d.logpdf(spec.x)
    val = -float(np.mean(ll))
    return val if math.isfinite(val) else math.inf


def _simplex(spec: _Spec, start: np.ndarray, max_iter: int):
    opts = {"maxiter": max_iter, "maxfev": 2 * max_iter, "xatol": 1e-6, "fatol": 1e-9, "adaptive": True}
    res = minimize(lambda th: _mean_nll(spec, th), start, method="Nelder-Mead", options=opts)
    if res.success:
        return res
    # One restart from the best vertex: recovers from a collapsed simplex.
    res2 = minimize(lambda th: _mean_nll(spec, th), res.x, method="Nelder-Mead", options=opts)
    return res2 if res2.fun <= res.fun else res


def fit_family(samples, family: str, max_iter: int = 1500) -> ErrorDistributionModel:
    """Maximum-likelihood fit of one family, returned with its KS distance."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < MIN_SAMPLES:
        raise FitError(f"need at least {MIN_SAMPLES} samples, got {x.size}")
    if not np.isfinite(x).all():
        raise FitError("samples contain non-finite values")
    if np.ptp(x) <= 1e-12 * max(1.0, float(np.abs(x).max())):
        raise DegenerateSamplesError("samples have zero variance")
    cls = family_class(family)
    if cls is Normal:
        dist = Normal(float(x.mean()), float(x.std()))
    else:
        spec = _SPECS[cls.family](x)
        best = None
        for start in spec.starts():
            res = _simplex(spec, start, max_iter)
            if best is None or res.fun < best.fun:
                best = res
        if best is None or not math.isfinite(best.fun):
            raise FitError(f"{cls.family}: likelihood is infinite at every start")
        if not best.success:
            raise FitError(
                f"{cls.family}: simplex search did not converge after {best.nit} iterations "
                f"(mean NLL {best.fun:.6g}, theta {np.array2string(best.x, precision=4)}): {best.message}"
            )
        dist = spec.build(best.x)
    mass = dist.pdf_mass()
    if abs(mass - 1.0) > 1e-3:
        raise FitError(f"{dist.describe()}: pdf integrates to {mass:.6f}")
    return ErrorDistributionModel(dist, ks_statistic(x, dist), int(x.size))


DEFAULT_CANDIDATES = FAMILY_ORDER

#: KS distances within ``TIE_BAND / sqrt(n)`` of the best are treated as tied.
TIE_BAND = 0.25


def select_best_fit(
    samples,
    candidates: Iterable[str] = DEFAULT_CANDIDATES,
    tie_band: float = TIE_BAND,
) -> ErrorDistributionModel:
    """Fit every candidate and keep the smallest KS distance.

    Near-ties go to the family with fewer parameters, then to the earlier
    family in :data:`FAMILY_ORDER`.
    """
    candidates = [family_class(c).family for c in candidates]
    if not candidates:
        raise ValueError("at least one candidate family is required")
    x = np.asarray(samples, dtype=np.float64).ravel()
    fits, failures = [], {}
    for fam in candidates:
        try:
            fits.append(fit_family(x, fam))
        except DegenerateSamplesError:
            raise
        except FitError as exc:
            failures[fam] = str(exc)
            log.info("fit of %s failed: %s", fam, exc)
    if not fits:
        raise FitError(f"every candidate failed: {failures}")
    best_ks = min(f.ks for f in fits)
    band = tie_band / math.sqrt(x.size)
    tied = [f for f in fits if f.ks <= best_ks + band]
    tied.sort(key=lambda f: (f.dist.n_params, FAMILY_ORDER.index(f.family), f.ks))
    return tied[0]


# ---------------------------------------------------------------- thresholds

THRESHOLD_KEYS = (
    "autoencoder.theta_a",
    "autoencoder.theta_l",
    "forecaster.theta_a",
    "forecaster.theta_l",
    "vision.theta_v",
)


@dataclass
class ThresholdSet:
    """Calibrated right-tail thresholds, keyed ``<detector>.<channel>``."""

    thresholds: dict = field(default_factory=dict)
    p: float = 0.95
    models: dict = field(default_factory=dict)

    def __getitem__(self, key: str) -> float:
        try:
            return self.thresholds[key]
        except KeyError:
            raise KeyError(f"no calibrated threshold for {key!r}") from None

    def to_text(self) -> str:
        lines = ["# right-tailed anomaly thresholds", f"confidence = {float(self.p)!r}"]
        for key in sorted(self.thresholds):
            lines.append(f"{key} = {float(self.thresholds[key])!r}")
            m = self.models.get(key)
            if m is not None:
                lines.append(f"{key}.family = {m.family}")
                lines.append(f"{key}.ks = {float(m.ks)!r}")
                lines.append(f"{key}.n = {m.n}")
                for pname, val in m.dist.params.items():
                    lines.append(f"{key}.param.{pname} = {float(val)!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ThresholdSet":
        kv = {}
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise ValueError(f"malformed threshold line: {raw!r}")
            kv[key.strip()] = val.strip()
        ts = cls(p=float(kv.pop("confidence", 0.95)))
        for key in [k for k in kv if k.count(".") == 1]:
            ts.thresholds[key] = float(kv[key])
            fam = kv.get(f"{key}.family")
            if fam:
                prefix = f"{key}.param."
                params = {k[len(prefix):]: float(v) for k, v in kv.items() if k.startswith(prefix)}
                dist = family_class(fam)(**params)
                ts.models[key] = ErrorDistributionModel(dist, float(kv[f"{key}.ks"]), int(kv[f"{key}.n"]))
        return ts


def calibrate_thresholds(
    error_streams: Mapping[str, Sequence[float]],
    p: float = 0.95,
    candidates: Iterable[str] = DEFAULT_CANDIDATES,
) -> ThresholdSet:
    """Fit each calibration error stream and take its right-tailed ``p`` quantile.

    ``error_streams`` maps threshold keys (see :data:`THRESHOLD_KEYS`) to the
    errors a detector produced on held-out normal data.
    """
    if not 0.0 < p < 1.0:
        raise ValueError("confidence level must lie in (0, 1)")
    candidates = list(candidates)
    ts = ThresholdSet(p=p)
    for key, errs in error_streams.items():
        errs = np.asarray(errs, dtype=np.float64).ravel()
        if errs.size < MIN_SAMPLES:
            raise FitError(f"{key}: need at least {MIN_SAMPLES} calibration errors, got {errs.size}")
        model = select_best_fit(errs, candidates)
        ts.models[key] = model
        ts.thresholds[key] = float(model.quantile(p))
        log.info("%s: %s (KS %.4f) -> threshold %.6g", key, model.dist.describe(), model.ks, ts.thresholds[key])
    return ts
