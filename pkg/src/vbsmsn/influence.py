"""Local influence under case-weight perturbation.

The perturbed log-likelihood is ``sum_t w_t ell_t(theta)`` with the null
perturbation at all-ones weights, so the perturbation matrix ``H`` is simply
the matrix of per-observation scores at the MLE.

``F = H' J^-1 H`` has rank at most q. Everything needed from it (diagonal,
Frobenius norm, leading eigenpair) is computed from the q x q Gram matrix of
``A = chol(J)^-1 H`` instead of forming the n x n matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .estimation import FitConfig, FitResult, fit as _fit
from .model import PARAM_NAMES, GrowthDataset, loglik, score_terms

__all__ = [
    "InfluenceReport",
    "RCEntry",
    "RCReport",
    "score_matrix",
    "normal_curvature",
    "influence_analysis",
    "influence_from_scores",
    "likelihood_displacement",
    "relative_change",
    "filter_and_refit",
    "fixed_params",
]


@dataclass(frozen=True, eq=False)
class InfluenceReport:
    B: np.ndarray
    C: np.ndarray
    m0_bar: float
    var_m0: float
    benchmark: float
    tau: float
    influential: tuple[int, ...]
    d_max: np.ndarray
    lambda_max: float
    frobenius: float
    method: str = "basis"

    @property
    def n(self) -> int:
        return self.B.size


@dataclass(frozen=True)
class RCEntry:
    name: str
    full: float
    filtered: float
    rc_percent: float


@dataclass(frozen=True, eq=False)
class RCReport:
    entries: tuple[RCEntry, ...]
    n_full: int
    n_filtered: int
    removed: tuple[int, ...] = ()
    filtered_fit: FitResult | None = field(default=None, repr=False)

    def as_dict(self) -> dict:
        return {e.name: e.rc_percent for e in self.entries}

    @property
    def removed_percent(self) -> float:
        return 100.0 * (self.n_full - self.n_filtered) / self.n_full


def fixed_params(fit: FitResult) -> dict:
    """Parameters held fixed in ``fit``, as a name -> value mapping."""
    arr = fit.theta_hat.as_array()
    return {PARAM_NAMES[i]: float(arr[i]) for i in fit.spec.active if i not in fit.free}


def score_matrix(fit: FitResult, data: GrowthDataset) -> np.ndarray:
    """q x n matrix whose column t is the score of observation t at the MLE."""
    S = score_terms(fit.theta_hat, fit.spec, data)
    pos = [fit.spec.active.index(i) for i in fit.free]
    return np.ascontiguousarray(S[:, pos].T)


def _chol_info(J):
    try:
        return cho_factor(J, lower=True)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("observed information is singular or not positive definite") from exc


def normal_curvature(fit: FitResult, H: np.ndarray, d) -> float:
    """Cook's normal curvature ``2 |d' H' J^-1 H d|`` along unit direction ``d``."""
    d = np.asarray(d, dtype=float)
    nrm = np.linalg.norm(d)
    if not np.isclose(nrm, 1.0, atol=1e-8):
        raise ValueError(f"direction must have unit length, got {nrm}")
    c = _chol_info(fit.info_matrix)
    Hd = H @ d
    return float(2.0 * abs(Hd @ cho_solve(c, Hd)))


def influence_from_scores(H, J, tau=2.0, method="basis") -> InfluenceReport:
    """Conformal curvatures and benchmark from a score matrix and information.

    ``method="basis"`` evaluates the conformal curvature at each standard
    basis direction. ``method="dmax"`` uses the absolute components of the
    maximum-curvature direction instead.
    """
    H = np.asarray(H, dtype=float)
    n = H.shape[1]
    if n < 2:
        raise ValueError("need at least two observations for the benchmark variance")
    if not tau > 0:
        raise ValueError("tau must be positive")
    Lc = np.linalg.cholesky(np.asarray(J, dtype=float))
    A = solve_triangular(Lc, H, lower=True)
    M = A @ A.T
    frob = float(np.linalg.norm(M, "fro"))
    evals, evecs = np.linalg.eigh(M)
    lam_max = float(evals[-1])
    v = A.T @ evecs[:, -1]
    d_max = v / np.linalg.norm(v)
    k = int(np.argmax(np.abs(d_max)))
    if d_max[k] < 0:
        d_max = -d_max
    Ftt = np.einsum("ij,ij->j", A, A)
    C = 2.0 * Ftt
    if method == "basis":
        B = Ftt / frob
    elif method == "dmax":
        B = np.abs(d_max)
    else:
        raise ValueError(f"unknown method {method!r}")
    m0 = float(np.mean(B))
    var = float(np.var(B, ddof=1))
    bench = m0 + tau * np.sqrt(var)
    infl = tuple(int(i) for i in np.flatnonzero(B > bench))
    return InfluenceReport(
        B=B,
        C=C,
        m0_bar=m0,
        var_m0=var,
        benchmark=float(bench),
        tau=float(tau),
        influential=infl,
        d_max=d_max,
        lambda_max=lam_max,
        frobenius=frob,
        method=method,
    )


def influence_analysis(fit: FitResult, data: GrowthDataset, tau: float = 2.0, method: str = "basis"):
    """Per-observation conformal curvatures and the influential set ``{t: B_t > c_d}``."""
    H = score_matrix(fit, data)
    try:
        return influence_from_scores(H, fit.info_matrix, tau, method)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("observed information is singular or not positive definite") from exc


def _refit(fit: FitResult, data, config, weights=None):
    config = config or FitConfig(n_starts=1)
    return _fit(fit.spec, data, config, weights=weights, fixed=fixed_params(fit) or None, start=fit.theta_hat)


def likelihood_displacement(fit: FitResult, data: GrowthDataset, omega, config: FitConfig | None = None) -> float:
    """``2 {l(theta_hat) - l(theta_hat_omega)}`` with both terms on the unperturbed likelihood."""
    omega = np.asarray(omega, dtype=float)
    if omega.shape != (data.n,):
        raise ValueError("omega must have one weight per observation")
    if np.any(omega < 0):
        raise ValueError("weights must be nonnegative")
    if np.all(omega == 1.0):
        return 0.0
    pert = _refit(fit, data, config, weights=omega)
    ld = 2.0 * (fit.loglik - loglik(pert.theta_hat, fit.spec, data))
    return max(ld, 0.0)


def relative_change(full, filtered) -> np.ndarray:
    """``|1 - filtered/full| * 100`` componentwise."""
    full = np.asarray(full, dtype=float)
    filtered = np.asarray(filtered, dtype=float)
    return np.abs(1.0 - filtered / full) * 100.0


def filter_and_refit(
    fit: FitResult, data: GrowthDataset, report: InfluenceReport, config: FitConfig | None = None
):
    """Refit without the influential cases and compare the growth parameters."""
    removed = tuple(report.influential)
    if not removed:
        refit = fit
        kept = data
    else:
        kept = data.without(removed)
        if kept.n < len(fit.free):
            raise ValueError(f"only {kept.n} observations left after filtering")
        refit = _refit(fit, kept, config or FitConfig())
    full = np.array(fit.theta_hat.beta)
    filt = np.array(refit.theta_hat.beta)
    rc = relative_change(full, filt) if removed else np.zeros(3)
    entries = tuple(RCEntry(PARAM_NAMES[k], float(full[k]), float(filt[k]), float(rc[k])) for k in range(3))
    return refit, RCReport(entries, data.n, kept.n, removed, refit)
