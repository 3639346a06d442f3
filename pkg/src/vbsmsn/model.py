"""Von Bertalanffy mean curve with heteroscedastic SMSN errors.

Parameter order is fixed everywhere (score vectors, information matrices,
influence matrices)::

    (L_inf, K, t0, sigma2, rho, lambda)

Normal and Student-t fits drop ``lambda``; the active subset for a family is
``spec.active``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np

from .distributions import (
    LOG2,
    SQRT_2_OVER_PI,
    delta,
    mix_moments,
    student_t_logcdf,
    student_t_logpdf,
)
from scipy.special import log_ndtr

__all__ = [
    "PARAM_NAMES",
    "Family",
    "ModelSpec",
    "ThetaVB",
    "GrowthDataset",
    "LikelihoodError",
    "vb_mean",
    "vb_mean_grad",
    "sigma_t",
    "mu_t",
    "response_variance",
    "loglik",
    "loglik_terms",
    "loglik_grad",
    "score_terms",
]

PARAM_NAMES = ("L_inf", "K", "t0", "sigma2", "rho", "lambda")
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class Family(str, enum.Enum):
    N = "N"
    SN = "SN"
    T = "T"
    ST = "ST"

    @property
    def is_mixture(self) -> bool:
        return self in (Family.T, Family.ST)

    @property
    def is_skew(self) -> bool:
        return self in (Family.SN, Family.ST)


class LikelihoodError(ValueError):
    """A log-likelihood term was not finite; ``index`` names the observation."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


@dataclass(frozen=True)
class ModelSpec:
    family: Family
    nu: float | None = None

    def __post_init__(self):
        fam = Family(self.family)
        object.__setattr__(self, "family", fam)
        if fam.is_mixture:
            if self.nu is None or not float(self.nu) > 2:
                raise ValueError(f"{fam.value} needs nu > 2, got {self.nu}")
            object.__setattr__(self, "nu", float(self.nu))
        elif self.nu is not None:
            raise ValueError(f"{fam.value} takes no nu")

    @property
    def active(self) -> tuple[int, ...]:
        return (0, 1, 2, 3, 4, 5) if self.family.is_skew else (0, 1, 2, 3, 4)

    @property
    def q(self) -> int:
        return len(self.active)

    @property
    def param_names(self) -> tuple[str, ...]:
        return tuple(PARAM_NAMES[i] for i in self.active)

    def label(self) -> str:
        if self.nu is None:
            return self.family.value
        return f"{self.family.value}(nu={self.nu:g})"


@dataclass(frozen=True)
class ThetaVB:
    L_inf: float
    K: float
    t0: float
    sigma2: float
    rho: float = 0.0
    lam: float = 0.0

    def __post_init__(self):
        vals = self.as_array()
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"non-finite parameter in {self}")
        if self.L_inf <= 0 or self.K <= 0 or self.sigma2 <= 0:
            raise ValueError("L_inf, K and sigma2 must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([self.L_inf, self.K, self.t0, self.sigma2, self.rho, self.lam], dtype=float)

    @classmethod
    def from_array(cls, arr) -> "ThetaVB":
        a = [float(v) for v in arr]
        return cls(*a)

    def active_vector(self, spec: ModelSpec) -> np.ndarray:
        return self.as_array()[list(spec.active)]

    @classmethod
    def from_active(cls, vec, spec: ModelSpec, base: "ThetaVB | None" = None) -> "ThetaVB":
        full = base.as_array() if base is not None else np.zeros(6)
        full[list(spec.active)] = vec
        if not spec.family.is_skew:
            full[5] = 0.0
        return cls.from_array(full)

    @property
    def beta(self) -> tuple[float, float, float]:
        return (self.L_inf, self.K, self.t0)

    def with_(self, **kw) -> "ThetaVB":
        return replace(self, **kw)


@dataclass(frozen=True, eq=False)
class GrowthDataset:
    """Paired ages (years, > 0) and lengths (cm, > 0)."""

    ages: np.ndarray
    lengths: np.ndarray

    def __post_init__(self):
        ages = np.ascontiguousarray(self.ages, dtype=float)
        lengths = np.ascontiguousarray(self.lengths, dtype=float)
        if ages.ndim != 1 or ages.shape != lengths.shape:
            raise ValueError("ages and lengths must be 1-d arrays of equal length")
        if ages.size < 1:
            raise ValueError("dataset is empty")
        if not (np.all(np.isfinite(ages)) and np.all(np.isfinite(lengths))):
            raise ValueError("ages and lengths must be finite")
        if np.any(ages <= 0):
            i = int(np.argmax(ages <= 0))
            raise ValueError(f"age must be positive (observation {i})")
        ages.setflags(write=False)
        lengths.setflags(write=False)
        object.__setattr__(self, "ages", ages)
        object.__setattr__(self, "lengths", lengths)

    def __len__(self):
        return self.ages.size

    @property
    def n(self) -> int:
        return self.ages.size

    def subset(self, idx) -> "GrowthDataset":
        return GrowthDataset(self.ages[idx], self.lengths[idx])

    def without(self, idx) -> "GrowthDataset":
        keep = np.ones(self.n, dtype=bool)
        keep[np.asarray(list(idx), dtype=int)] = False
        return self.subset(keep)


def vb_mean(beta, age):
    """``L_inf * (1 - exp(-K (age - t0)))``."""
    L, K, t0 = beta
    age = np.asarray(age, dtype=float)
    out = L * -np.expm1(-K * (age - t0))
    return float(out) if out.ndim == 0 else out


def vb_mean_grad(beta, age) -> np.ndarray:
    """Jacobian of the mean curve w.r.t. (L_inf, K, t0); shape (n, 3)."""
    L, K, t0 = beta
    age = np.atleast_1d(np.asarray(age, dtype=float))
    e = np.exp(-K * (age - t0))
    return np.column_stack([-np.expm1(-K * (age - t0)), L * (age - t0) * e, -L * K * e])


def sigma_t(theta: ThetaVB, age):
    age = np.asarray(age, dtype=float)
    if np.any(age <= 0):
        raise ValueError("age must be positive")
    out = np.sqrt(theta.sigma2 * age**theta.rho)
    return float(out) if out.ndim == 0 else out


def _lam(theta_lam, spec):
    return float(theta_lam) if spec.family.is_skew else 0.0


def mu_t(theta: ThetaVB, spec: ModelSpec, age):
    """Location shift ``-sqrt(2/pi) kappa1 sigma_t delta`` that centres the error."""
    k1 = mix_moments(spec).kappa1
    out = -SQRT_2_OVER_PI * k1 * np.asarray(sigma_t(theta, age)) * delta(_lam(theta.lam, spec))
    return float(out) if np.ndim(out) == 0 else out


def response_variance(theta: ThetaVB, spec: ModelSpec, age):
    """Variance of the response, ``sigma_t^2 (kappa2 - (2/pi) kappa1^2 delta^2)``.

    Equal to ``kappa2 sigma_t^2 (1 - (2/pi) delta^2)`` when the error is
    symmetric or the mixing is degenerate; in general the squared mean of
    ``v^-1/2 e`` carries ``kappa1^2``, not ``kappa2``.
    """
    m = mix_moments(spec)
    d = delta(_lam(theta.lam, spec))
    out = np.asarray(sigma_t(theta, age)) ** 2 * (m.kappa2 - (2.0 / math.pi) * m.kappa1**2 * d * d)
    return float(out) if np.ndim(out) == 0 else out


def _terms(vec, spec: ModelSpec, x, y, logx=None, want_grad=True):
    """Per-observation log-density and its gradient w.r.t. all six parameters.

    ``vec`` is the full length-6 parameter array. Returns ``(ell, G)`` with
    ``G`` of shape (n, 6); ``G`` is None when ``want_grad`` is false.
    """
    L, K, t0, s2, rho, lam = vec
    lam = _lam(lam, spec)
    if logx is None:
        logx = np.log(x)
    k1 = mix_moments(spec).kappa1
    b = SQRT_2_OVER_PI * k1
    rt = 1.0 / math.sqrt(1.0 + lam * lam)
    d = lam * rt

    u = x - t0
    e = np.exp(-K * u)
    eta = -L * np.expm1(-K * u)
    logs = 0.5 * math.log(s2) + 0.5 * rho * logx
    s = np.exp(logs)
    r = y - eta
    z = r / s + b * d

    if spec.family.is_mixture:
        nu = spec.nu
        q = nu + z * z
        w = z * np.sqrt((nu + 1.0) / q)
        logg = student_t_logpdf(z, nu)
        logG = student_t_logcdf(lam * w, nu + 1.0)
    else:
        w = z
        logg = -0.5 * z * z - HALF_LOG_2PI
        logG = log_ndtr(lam * z)
    ell = LOG2 - logs + logg + logG
    if not want_grad:
        return ell, None

    if spec.family.is_mixture:
        dlogg = -(nu + 1.0) * z / q
        dw = math.sqrt(nu + 1.0) * nu * q**-1.5
        ratio = np.exp(student_t_logpdf(lam * w, nu + 1.0) - logG)
    else:
        dlogg = -z
        dw = 1.0
        ratio = np.exp(-0.5 * (lam * z) ** 2 - HALF_LOG_2PI - logG)
    dz = dlogg + ratio * lam * dw
    # z depends on s only through r/s since mu/s is constant.
    ds = -1.0 / s - dz * r / (s * s)

    G = np.empty((x.size, 6))
    G[:, 0] = dz * (-1.0 / s) * (-np.expm1(-K * u))
    G[:, 1] = dz * (-1.0 / s) * (L * u * e)
    G[:, 2] = dz * (-1.0 / s) * (-L * K * e)
    G[:, 3] = ds * s / (2.0 * s2)
    G[:, 4] = ds * s * 0.5 * logx
    G[:, 5] = ratio * w + dz * b * rt**3
    return ell, G


def _check_finite(ell, G=None):
    bad = ~np.isfinite(ell)
    if G is not None:
        bad |= ~np.all(np.isfinite(G), axis=1)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise LikelihoodError(f"non-finite log-likelihood term at observation {i}", index=i)


def loglik_terms(theta: ThetaVB, spec: ModelSpec, data: GrowthDataset) -> np.ndarray:
    """Per-observation log-likelihood contributions."""
    with np.errstate(all="ignore"):
        ell, _ = _terms(theta.as_array(), spec, data.ages, data.lengths, want_grad=False)
    _check_finite(ell)
    return ell


def loglik(theta: ThetaVB, spec: ModelSpec, data: GrowthDataset, weights=None) -> float:
    """Total (optionally case-weighted) log-likelihood."""
    ell = loglik_terms(theta, spec, data)
    if weights is not None:
        ell = np.asarray(weights, dtype=float) * ell
    return float(np.sum(ell))


def score_terms(theta: ThetaVB, spec: ModelSpec, data: GrowthDataset) -> np.ndarray:
    """Per-observation scores over the active parameters, shape (n, q)."""
    with np.errstate(all="ignore"):
        ell, G = _terms(theta.as_array(), spec, data.ages, data.lengths)
    _check_finite(ell, G)
    return G[:, list(spec.active)]


def loglik_grad(theta: ThetaVB, spec: ModelSpec, data: GrowthDataset, weights=None) -> np.ndarray:
    """Gradient of the log-likelihood over the active parameters, in fixed order."""
    S = score_terms(theta, spec, data)
    if weights is not None:
        S = S * np.asarray(weights, dtype=float)[:, None]
    return S.sum(axis=0)
