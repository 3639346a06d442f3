"""Skew-normal and skew-t primitives shared by the four error families.

All functions are vectorised over ``x``. Scale-mixture helpers work from a
:class:`~vbsmsn.model.ModelSpec`-like object exposing ``family`` and ``nu``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import betaln, gammaln, log_ndtr, ndtr, stdtr

__all__ = [
    "SkewNormalParams",
    "SkewTParams",
    "MixMoments",
    "delta",
    "sn_pdf",
    "sn_logpdf",
    "st_pdf",
    "st_logpdf",
    "student_t_pdf",
    "student_t_logpdf",
    "student_t_cdf",
    "student_t_logcdf",
    "mix_moments",
    "sample_smsn_error",
]

LOG2 = math.log(2.0)
SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def delta(lam):
    """Skewness index ``lam / sqrt(1 + lam**2)``, always inside (-1, 1)."""
    lam = np.asarray(lam, dtype=float)
    out = lam / np.sqrt(1.0 + lam * lam)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class SkewNormalParams:
    location: float = 0.0
    scale: float = 1.0
    shape: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        if not (np.isfinite(self.location) and np.isfinite(self.shape)):
            raise ValueError("location and shape must be finite")

    def delta(self) -> float:
        return delta(self.shape)


@dataclass(frozen=True)
class SkewTParams:
    location: float = 0.0
    scale: float = 1.0
    shape: float = 0.0
    dof: float = 4.0

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        if not (self.dof > 0):
            raise ValueError(f"dof must be positive, got {self.dof}")
        if not (np.isfinite(self.location) and np.isfinite(self.shape)):
            raise ValueError("location and shape must be finite")

    def delta(self) -> float:
        return delta(self.shape)


@dataclass(frozen=True)
class MixMoments:
    """``kappa1 = E[v^-1/2]`` and ``kappa2 = E[v^-1]`` of the mixing variable."""

    kappa1: float
    kappa2: float


def _check_x(x):
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("x must be finite")
    return x


def _scalar(out):
    return float(out) if np.ndim(out) == 0 else out


def sn_logpdf(x, p: SkewNormalParams):
    z = (_check_x(x) - p.location) / p.scale
    out = LOG2 - math.log(p.scale) - 0.5 * z * z - 0.5 * math.log(2 * math.pi)
    out = out + log_ndtr(p.shape * z)
    return _scalar(out)


def sn_pdf(x, p: SkewNormalParams):
    """``(2/scale) * phi(z) * Phi(shape * z)`` with ``z = (x - location)/scale``."""
    z = (_check_x(x) - p.location) / p.scale
    out = 2.0 / p.scale * np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi) * ndtr(p.shape * z)
    return _scalar(out)


def student_t_logpdf(x, dof):
    x = np.asarray(x, dtype=float)
    dof = float(dof)
    # betaln keeps the normaliser accurate for very large dof
    lognorm = -0.5 * math.log(dof) - betaln(0.5, 0.5 * dof)
    return _scalar(lognorm - 0.5 * (dof + 1.0) * np.log1p(x * x / dof))


def student_t_pdf(x, dof):
    return _scalar(np.exp(student_t_logpdf(x, dof)))


def _t_lower_tail(x, dof):
    # P(T <= x) for x <= 0. stdtr is the Cephes regularized-incomplete-beta
    # route and stays accurate for large dof, unlike a plain betainc call.
    return stdtr(dof, x)


def student_t_cdf(x, dof):
    """Student-t distribution function with real ``dof > 0``.

    Evaluated through the regularized incomplete beta on the lower tail;
    ``T(-x) = 1 - T(x)`` holds to rounding because both tails share one
    evaluation.
    """
    dof = float(dof)
    if not dof > 0:
        raise ValueError(f"dof must be positive, got {dof}")
    x = np.asarray(x, dtype=float)
    xa = np.atleast_1d(x)
    out = np.empty_like(xa)
    inf = np.isinf(xa)
    out[inf] = np.where(xa[inf] > 0, 1.0, 0.0)
    fin = ~inf
    lower = _t_lower_tail(-np.abs(xa[fin]), dof)
    out[fin] = np.where(xa[fin] > 0, 1.0 - lower, lower)
    return _scalar(out.reshape(x.shape))


def _log_lower_tail_cf(x, dof, itmax=500, tol=1e-16):
    """``log T(x)`` for x < 0 from the incomplete-beta continued fraction.

    Used only where ``stdtr`` underflows. There ``y = dof/(dof + x^2)`` sits
    well below the switch point of the fraction, so it converges in a few
    dozen terms. The prefactor is kept in log space.
    """
    a, b = 0.5 * dof, 0.5
    lx2 = 2.0 * np.log(np.abs(x))
    lden = lx2 + np.log1p(dof * np.exp(-lx2))
    logy = np.log(dof) - lden
    log1my = lx2 - lden
    y = np.exp(logy)
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = np.ones_like(y)
    d = 1.0 - qab * y / qap
    d = 1.0 / np.where(np.abs(d) < tiny, tiny, d)
    h = d.copy()
    for m in range(1, itmax + 1):
        m2 = 2 * m
        for aa in (m * (b - m) * y / ((qam + m2) * (a + m2)), -(a + m) * (qab + m) * y / ((a + m2) * (qap + m2))):
            d = 1.0 + aa * d
            d = 1.0 / np.where(np.abs(d) < tiny, tiny, d)
            c = 1.0 + aa / c
            c = np.where(np.abs(c) < tiny, tiny, c)
            h = h * d * c
        if np.all(np.abs(d * c - 1.0) < tol):
            break
    return a * logy + b * log1my - betaln(a, b) - np.log(a) + np.log(h) - LOG2


def student_t_logcdf(x, dof):
    """``log T(x; dof)`` without underflow in the far left tail."""
    dof = float(dof)
    x = np.asarray(x, dtype=float)
    xa = np.atleast_1d(x)
    out = np.empty_like(xa)
    neg = xa <= 0
    lower = _t_lower_tail(xa[neg], dof)
    with np.errstate(divide="ignore"):
        out[neg] = np.log(lower)
    pos = ~neg
    out[pos] = np.log1p(-_t_lower_tail(-xa[pos], dof))
    bad = ~np.isfinite(out) & neg
    if np.any(bad):
        out[bad] = _log_lower_tail_cf(xa[bad], dof)
    return _scalar(out.reshape(x.shape))


def st_logpdf(x, p: SkewTParams):
    z = (_check_x(x) - p.location) / p.scale
    nu = float(p.dof)
    w = p.shape * z * np.sqrt((nu + 1.0) / (nu + z * z))
    out = LOG2 - math.log(p.scale) + student_t_logpdf(z, nu) + student_t_logcdf(w, nu + 1.0)
    return _scalar(out)


def st_pdf(x, p: SkewTParams):
    """Skew-t density ``(2/scale) t(z; nu) T(shape z sqrt((nu+1)/(nu+z^2)); nu+1)``."""
    return _scalar(np.exp(st_logpdf(x, p)))


def mix_moments(spec) -> MixMoments:
    """Mixing moments for a model spec.

    Normal and skew-normal have a degenerate mixing law, so both moments are 1.
    The t families mix over Gamma(nu/2, nu/2).
    """
    if not spec.family.is_mixture:
        return MixMoments(1.0, 1.0)
    nu = spec.nu
    if nu is None or not nu > 2:
        raise ValueError(f"moments undefined for nu={nu}; need nu > 2")
    k1 = math.sqrt(nu / 2.0) * math.exp(gammaln((nu - 1.0) / 2.0) - gammaln(nu / 2.0))
    return MixMoments(k1, nu / (nu - 2.0))


def sample_smsn_error(n, sigma_t, lam, spec, seed):
    """Draw zero-mean SMSN errors ``v^-1/2 e + mu``.

    ``e`` is skew-normal with scale ``sigma_t`` built from two independent
    standard normals; ``mu`` is the location shift that centres the error.

    Parameters
    ----------
    n : int
        Number of draws.
    sigma_t : float or array of length n
        Per-draw scale, strictly positive.
    lam : float
        Shape parameter.
    spec : ModelSpec
        Error family; ``nu`` enters the Gamma mixing law for T/ST.
    seed : int or numpy Generator
    """
    n = int(n)
    if n < 1:
        raise ValueError("n must be >= 1")
    sigma_t = np.broadcast_to(np.asarray(sigma_t, dtype=float), (n,))
    if not np.all(sigma_t > 0):
        raise ValueError("sigma_t must be strictly positive")
    lam = float(lam) if spec.family.is_skew else 0.0
    kap = mix_moments(spec)
    rng = np.random.default_rng(seed)
    d = delta(lam)
    u0 = np.abs(rng.standard_normal(n))
    u1 = rng.standard_normal(n)
    e = sigma_t * (d * u0 + math.sqrt(1.0 - d * d) * u1)
    if spec.family.is_mixture:
        v = rng.gamma(shape=spec.nu / 2.0, scale=2.0 / spec.nu, size=n)
        e = e / np.sqrt(v)
    mu = -SQRT_2_OVER_PI * kap.kappa1 * sigma_t * d
    return e + mu
