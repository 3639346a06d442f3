"""Maximum-likelihood fitting, nu profiling, observed information and bands."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.stats import norm

from .model import (
    PARAM_NAMES,
    Family,
    GrowthDataset,
    LikelihoodError,
    ModelSpec,
    ThetaVB,
    _terms,
    vb_mean,
    vb_mean_grad,
)

log = logging.getLogger(__name__)

__all__ = [
    "FitConfig",
    "FitResult",
    "ProfileResult",
    "FitError",
    "fit",
    "profile_nu",
    "observed_information",
    "confidence_band",
    "aic",
    "starting_values",
]

SIGMA2_FLOOR = 1e-12
_LOG_PARAMS = (0, 1, 3)  # L_inf, K, sigma2 are optimised on the log scale
_BOUNDS = {
    0: (math.log(1e-6), math.log(1e6)),
    1: (math.log(1e-8), math.log(50.0)),
    2: (-1e3, 1e3),
    3: (math.log(SIGMA2_FLOOR), math.log(1e12)),
    4: (-30.0, 30.0),
    5: (-60.0, 60.0),
}


class FitError(RuntimeError):
    """No start produced a usable optimum. ``trace`` holds one entry per start."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


@dataclass(frozen=True)
class FitConfig:
    nu_grid: tuple = tuple(float(v) for v in range(3, 61))
    max_iter: int = 500
    grad_tol: float = 1e-6
    param_tol: float = 1e-8
    n_starts: int = 5
    seed: int = 0

    def __post_init__(self):
        grid = tuple(float(v) for v in self.nu_grid)
        if not grid:
            raise ValueError("nu_grid is empty")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError("nu_grid must be strictly increasing")
        if grid[0] <= 2:
            raise ValueError("nu_grid values must exceed 2")
        if self.grad_tol <= 0 or self.param_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.n_starts < 1 or self.max_iter < 1:
            raise ValueError("n_starts and max_iter must be >= 1")
        object.__setattr__(self, "nu_grid", grid)

    @classmethod
    def grid(cls, nu_min=3.0, nu_max=60.0, nu_step=1.0, **kw) -> "FitConfig":
        vals = np.arange(nu_min, nu_max + 0.5 * nu_step, nu_step)
        return cls(nu_grid=tuple(round(float(v), 10) for v in vals), **kw)


@dataclass(frozen=True, eq=False)
class FitResult:
    spec: ModelSpec
    theta_hat: ThetaVB
    loglik: float
    aic: float
    info_matrix: np.ndarray
    std_errors: np.ndarray | None
    converged: bool
    iterations: int
    n_used: int
    free: tuple[int, ...]
    grad_max: float
    info_pd: bool
    trace: list = field(default_factory=list, repr=False)

    @property
    def q(self) -> int:
        return self.spec.q

    @property
    def free_names(self) -> tuple[str, ...]:
        return tuple(PARAM_NAMES[i] for i in self.free)

    def std_error(self, name: str) -> float:
        """Standard error by parameter name; nan if fixed or unavailable."""
        idx = PARAM_NAMES.index(name)
        if self.std_errors is None or idx not in self.free:
            return float("nan")
        return float(self.std_errors[self.free.index(idx)])

    def covariance(self) -> np.ndarray:
        if not self.info_pd:
            raise np.linalg.LinAlgError("observed information is not positive definite")
        return np.linalg.inv(self.info_matrix)


@dataclass(frozen=True, eq=False)
class ProfileResult:
    grid: np.ndarray
    logliks: np.ndarray
    best_nu: float
    best_fit: FitResult
    failed: tuple = ()
    fits: tuple = field(default=(), repr=False)


def aic(fit_or_loglik, q=None) -> float:
    """``-2 (loglik - q)``; accepts a FitResult or a raw log-likelihood and q."""
    if isinstance(fit_or_loglik, FitResult):
        return -2.0 * (fit_or_loglik.loglik - fit_or_loglik.q)
    return -2.0 * (float(fit_or_loglik) - q)


# -- starting values ---------------------------------------------------------


def _sn_shape_from_skewness(g: float) -> float:
    # Invert the skew-normal skewness for delta, clipped inside the attainable range.
    c = np.cbrt(2.0 * g / (4.0 - math.pi))
    m = c / math.sqrt(1.0 + c * c)
    d = float(np.clip(m * math.sqrt(math.pi / 2.0), -0.95, 0.95))
    return d / math.sqrt(1.0 - d * d)


def starting_values(spec: ModelSpec, data: GrowthDataset) -> ThetaVB:
    """Heuristic start: Ford-Walford style curve, residual variance, moment skewness."""
    x, y = data.ages, data.lengths
    L0 = 1.05 * float(np.max(y))
    frac = np.clip(1.0 - y / L0, 1e-6, None)
    A = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(A, np.log(frac), rcond=None)
    K0 = float(np.clip(-coef[1], 1e-3, 5.0))
    t00 = float(np.clip(coef[0] / K0, -50.0, np.min(x) - 1e-3))

    def resid(p):
        return vb_mean((p[0], p[1], p[2]), x) - y

    try:
        ls = optimize.least_squares(
            resid, [L0, K0, t00], bounds=([1e-6, 1e-6, -1e3], [1e6, 50.0, 1e3]), x_scale="jac"
        )
        if ls.success and np.all(np.isfinite(ls.x)):
            L0, K0, t00 = (float(v) for v in ls.x)
    except ValueError:
        pass
    r = y - vb_mean((L0, K0, t00), x)
    s2 = max(float(np.var(r)), SIGMA2_FLOOR)
    lam = 0.0
    if spec.family.is_skew and r.size > 2 and np.std(r) > 0:
        g = float(np.mean((r - r.mean()) ** 3) / np.std(r) ** 3)
        lam = _sn_shape_from_skewness(g)
        if abs(lam) < 0.1:
            # lambda = 0 is a stationary point of the skew-normal likelihood
            lam = 0.1 if lam >= 0 else -0.1
    return ThetaVB(L0, K0, t00, s2, 0.0, lam)


# -- objective ---------------------------------------------------------------


class _Objective:
    """Negative weighted log-likelihood over the free parameters in transformed space."""

    def __init__(self, spec, data, base, free, weights):
        self.spec = spec
        self.x = data.ages
        self.y = data.lengths
        self.logx = np.log(self.x)
        self.base = base.as_array()
        if not spec.family.is_skew:
            self.base[5] = 0.0
        self.free = np.asarray(free, dtype=int)
        self.w = None if weights is None else np.asarray(weights, dtype=float)
        self.scale = float(self.x.size if self.w is None else max(np.sum(self.w), 1.0))
        self.is_log = np.isin(self.free, _LOG_PARAMS)

    def to_full(self, u):
        full = self.base.copy()
        vals = np.where(self.is_log, np.exp(u), u)
        full[self.free] = vals
        return full

    def to_u(self, full):
        vals = full[self.free]
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.is_log, np.log(vals), vals)

    def value_grad_full(self, full, want_grad=True):
        ell, G = _terms(full, self.spec, self.x, self.y, self.logx, want_grad)
        if self.w is not None:
            # zero-weight cases drop out entirely, even where their term is not finite
            ell = np.where(self.w != 0, self.w * ell, 0.0)
            if G is not None:
                G = np.where(self.w[:, None] != 0, G * self.w[:, None], 0.0)
        total = float(np.sum(ell))
        g = None if G is None else G.sum(axis=0)
        return total, g

    def __call__(self, u):
        full = self.to_full(u)
        with np.errstate(all="ignore"):
            total, g = self.value_grad_full(full)
        if not np.isfinite(total) or not np.all(np.isfinite(g)):
            return np.inf, np.zeros_like(u)
        gu = g[self.free] * np.where(self.is_log, full[self.free], 1.0)
        return -total / self.scale, -gu / self.scale


def _fd_hessian(obj: _Objective, full: np.ndarray, rel_step=1e-5) -> np.ndarray:
    """Central differences of the analytic gradient over the free parameters."""
    free = obj.free
    k = free.size
    Hs = np.empty((k, k))
    for j, idx in enumerate(free):
        h = rel_step * (1.0 + abs(full[idx]))
        if idx in _LOG_PARAMS:
            h = min(h, 0.5 * full[idx])
        fp = full.copy()
        fm = full.copy()
        fp[idx] += h
        fm[idx] -= h
        _, gp = obj.value_grad_full(fp)
        _, gm = obj.value_grad_full(fm)
        Hs[:, j] = (gp[free] - gm[free]) / (2.0 * h)
    return 0.5 * (Hs + Hs.T)


def _pinned(obj, full):
    """Per free parameter: -1 / +1 when sitting on its lower / upper bound, else 0.

    Only the variance floor and the shape bounds can be active at an optimum.
    """
    out = np.zeros(obj.free.size, dtype=int)
    for j, i in enumerate(obj.free):
        if i == 3 and full[3] <= SIGMA2_FLOOR * (1 + 1e-6):
            out[j] = -1
        elif i == 5 and abs(full[5]) >= _BOUNDS[5][1] * (1 - 1e-9):
            out[j] = 1 if full[5] > 0 else -1
    return out


def _at_floor(obj, full):
    return _pinned(obj, full) != 0


def _grad_max(obj, full):
    """Largest projected gradient component; outward pressure on an active bound is ignored."""
    _, g = obj.value_grad_full(full)
    g = g[obj.free]
    side = _pinned(obj, full)
    g = np.where(side * g > 0, 0.0, g)
    return float(np.max(np.abs(g))) if g.size else 0.0


def _newton_step(obj, full):
    """Largest relative Newton step ``|H^-1 g|_k / (1 + |theta_k|)`` off the floor.

    Infinite when the Hessian over the unfloored parameters is not positive
    definite.
    """
    keep = ~_at_floor(obj, full)
    if not np.any(keep):
        return 0.0
    H = -_fd_hessian(obj, full)[np.ix_(keep, keep)]
    _, g = obj.value_grad_full(full)
    g = g[obj.free][keep]
    try:
        c = np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        return math.inf
    step = np.linalg.solve(c.T, np.linalg.solve(c, g))
    return float(np.max(np.abs(step) / (1.0 + np.abs(full[obj.free][keep]))))


def _u_hessian(obj: _Objective, u: np.ndarray) -> np.ndarray:
    k = u.size
    Hs = np.empty((k, k))
    for j in range(k):
        h = 1e-5 * (1.0 + abs(u[j]))
        up = u.copy()
        um = u.copy()
        up[j] += h
        um[j] -= h
        Hs[:, j] = (obj(up)[1] - obj(um)[1]) / (2.0 * h)
    return 0.5 * (Hs + Hs.T)


def _polish(obj: _Objective, full: np.ndarray, grad_tol: float, max_iter=50):
    """Modified Newton refinement after L-BFGS-B.

    Near the optimum the change in the objective falls below its rounding
    noise, so a step is also accepted when it leaves the objective unchanged
    within noise and shrinks the gradient. A component sitting on the
    variance floor or a shape bound is held there.
    """
    floor = _at_floor(obj, full)
    if np.any(floor):
        obj = _Objective(obj.spec, _Data(obj.x, obj.y), ThetaVB.from_array(full), obj.free[~floor], obj.w)
    u = obj.to_u(full)
    lo = np.array([_BOUNDS[i][0] for i in obj.free])
    hi = np.array([_BOUNDS[i][1] for i in obj.free])
    f, g = obj(u)
    it = 0
    for it in range(1, max_iter + 1):
        if _grad_max(obj, obj.to_full(u)) <= 0.01 * grad_tol:
            break
        Hu = _u_hessian(obj, u)
        if not np.all(np.isfinite(Hu)):
            break
        ev, V = np.linalg.eigh(Hu)
        ev = np.maximum(np.abs(ev), 1e-10 * max(np.max(np.abs(ev)), 1e-300))
        step = -V @ ((V.T @ g) / ev)
        noise = 1e-13 * (1.0 + abs(f))
        gn = np.linalg.norm(g)
        t = 1.0
        accepted = False
        while t > 1e-8:
            cand = np.clip(u + t * step, lo, hi)
            fc, gc = obj(cand)
            if np.isfinite(fc) and (fc < f - noise or (fc <= f + noise and np.linalg.norm(gc) < gn)):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        u, f, g = cand, fc, gc
    return obj.to_full(u), it


class _Data:
    def __init__(self, ages, lengths):
        self.ages = ages
        self.lengths = lengths


def _perturbed_start(theta: ThetaVB, rng) -> ThetaVB:
    a = theta.as_array()
    z = rng.standard_normal(6)
    a[0] *= math.exp(0.05 * z[0])
    a[1] *= math.exp(0.2 * z[1])
    a[2] += 0.5 * z[2]
    a[3] *= math.exp(0.3 * z[3])
    a[4] += 0.2 * z[4]
    a[5] = a[5] * math.exp(0.3 * z[5]) + 0.3 * rng.standard_normal()
    return ThetaVB.from_array(a)


def _resolve_fixed(spec, fixed):
    fixed = dict(fixed or {})
    idx = {}
    for name, val in fixed.items():
        if name not in PARAM_NAMES:
            raise ValueError(f"unknown parameter {name!r}")
        i = PARAM_NAMES.index(name)
        if i not in spec.active:
            raise ValueError(f"{name} is not a parameter of family {spec.family.value}")
        idx[i] = float(val)
    return idx


def observed_information(
    theta_hat: ThetaVB, spec: ModelSpec, data: GrowthDataset, weights=None, free=None
) -> np.ndarray:
    """Negated Hessian of the log-likelihood over the active (or given free) parameters.

    Built from central differences of the analytic score with step
    ``1e-5 * (1 + |theta_k|)`` and symmetrised.
    """
    free = tuple(spec.active if free is None else free)
    obj = _Objective(spec, data, theta_hat, free, weights)
    return -_fd_hessian(obj, obj.base)


def _information_summary(J):
    try:
        np.linalg.cholesky(J)
    except np.linalg.LinAlgError:
        return False, None
    cov = np.linalg.inv(J)
    d = np.diag(cov)
    if np.any(d <= 0) or not np.all(np.isfinite(d)):
        return False, None
    return True, np.sqrt(d)


def fit(
    spec: ModelSpec,
    data: GrowthDataset,
    config: FitConfig | None = None,
    *,
    weights=None,
    fixed: dict | None = None,
    start: ThetaVB | None = None,
) -> FitResult:
    """Maximise the (optionally case-weighted) log-likelihood.

    ``fixed`` maps parameter names to values held constant. ``start`` replaces
    the heuristic first start; the remaining ``n_starts - 1`` starts are seeded
    log-normal perturbations of it.
    """
    config = config or FitConfig()
    fixed_idx = _resolve_fixed(spec, fixed)
    free = tuple(i for i in spec.active if i not in fixed_idx)
    n_used = data.n if weights is None else int(np.count_nonzero(np.asarray(weights)))
    if n_used < len(free):
        raise ValueError(f"need at least {len(free)} observations, got {n_used}")

    base = start if start is not None else starting_values(spec, data)
    if fixed_idx:
        a = base.as_array()
        for i, v in fixed_idx.items():
            a[i] = v
        base = ThetaVB.from_array(a)
    rng = np.random.default_rng(config.seed)
    starts = [base] + [_perturbed_start(base, rng) for _ in range(config.n_starts - 1)]
    if fixed_idx:
        starts = [
            ThetaVB.from_array([fixed_idx.get(i, v) for i, v in enumerate(s.as_array())])
            for s in starts
        ]

    bounds = [_BOUNDS[i] for i in free]
    trace = []
    candidates = []
    for k, s in enumerate(starts):
        obj = _Objective(spec, data, s, free, weights)
        u0 = np.clip(obj.to_u(obj.base), [b[0] for b in bounds], [b[1] for b in bounds])
        f0, _ = obj(u0)
        if not np.isfinite(f0):
            trace.append({"start": k, "status": "non-finite start"})
            continue
        res = optimize.minimize(
            obj,
            u0,
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": config.max_iter, "ftol": 1e-15, "gtol": 1e-10, "maxcor": 20},
        )
        val = -res.fun * obj.scale
        trace.append({"start": k, "loglik": float(val), "nit": int(res.nit), "message": str(res.message)})
        if np.isfinite(val):
            candidates.append((val, k, obj, obj.to_full(res.x), int(res.nit)))
    if not candidates:
        raise FitError(f"no start produced a finite optimum for {spec.label()}", trace)

    candidates.sort(key=lambda c: (-c[0], c[1]))
    chosen = None
    for val, k, obj, full, nit in candidates:
        polished, steps = _polish(obj, full, config.grad_tol)
        gmax = _grad_max(obj, polished)
        trace[k]["grad_max"] = gmax
        ok = gmax <= config.grad_tol
        if not ok:
            # exact or near-exact fits: rounding in the residuals keeps the
            # gradient large while the Newton step is already negligible
            step = _newton_step(obj, polished)
            trace[k]["newton_step"] = step
            ok = step <= config.param_tol
        if chosen is None:
            chosen = (obj, polished, nit + steps, gmax, ok)
        if ok:
            chosen = (obj, polished, nit + steps, gmax, ok)
            break
        # only fall through to the next start if it is essentially as good
        if len(candidates) > 1 and val < candidates[0][0] - 1e-6 * abs(candidates[0][0]):
            break
    obj, full, iters, gmax, converged = chosen
    if not converged:
        raise FitError(
            f"{spec.label()}: no start reached grad_tol={config.grad_tol:g} (best {gmax:.3g})", trace
        )

    theta_hat = ThetaVB.from_array(full)
    ll, _ = obj.value_grad_full(full, want_grad=False)
    J = -_fd_hessian(obj, full)
    info_pd, se = _information_summary(J)
    if spec.family.is_skew and 5 in free and abs(full[5]) >= _BOUNDS[5][1] * (1 - 1e-9):
        warnings.warn(f"{spec.label()}: shape parameter on its bound {full[5]:g}; the likelihood increases without limit")
    if not info_pd:
        warnings.warn(f"{spec.label()}: observed information not positive definite; SEs unavailable")
    return FitResult(
        spec=spec,
        theta_hat=theta_hat,
        loglik=float(ll),
        aic=aic(float(ll), spec.q),
        info_matrix=J,
        std_errors=se,
        converged=converged,
        iterations=iters,
        n_used=n_used,
        free=free,
        grad_max=gmax,
        info_pd=info_pd,
        trace=trace,
    )


def profile_nu(family, data: GrowthDataset, config: FitConfig | None = None, **fit_kw) -> ProfileResult:
    """Fit a t-family model at each grid value of nu; the argmax is the nu estimate.

    Each grid point after the first is warm-started from the previous optimum.
    Grid points whose fit fails are recorded in ``failed`` and excluded.
    """
    config = config or FitConfig()
    family = Family(family)
    if not family.is_mixture:
        raise ValueError("profile_nu needs a T or ST family")
    grid = np.asarray(config.nu_grid, dtype=float)
    logliks = np.full(grid.size, np.nan)
    fits = [None] * grid.size
    failed = []
    warm = None
    warm_cfg = FitConfig(
        nu_grid=config.nu_grid,
        max_iter=config.max_iter,
        grad_tol=config.grad_tol,
        param_tol=config.param_tol,
        n_starts=1,
        seed=config.seed,
    )
    for i, nu in enumerate(grid):
        spec = ModelSpec(family, float(nu))
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                if warm is None:
                    f = fit(spec, data, config, **fit_kw)
                else:
                    f = fit(spec, data, warm_cfg, start=warm, **fit_kw)
                    # a cold start guards against a warm start stuck on a poor branch
                    if i % 10 == 0 and config.n_starts > 1:
                        g = fit(spec, data, config, **fit_kw)
                        if g.loglik > f.loglik:
                            f = g
        except (FitError, LikelihoodError) as exc:
            log.warning("profile %s nu=%g failed: %s", family.value, nu, exc)
            failed.append(float(nu))
            continue
        fits[i] = f
        logliks[i] = f.loglik
        warm = f.theta_hat
    ok = np.isfinite(logliks)
    if not np.any(ok):
        raise FitError(f"every grid point failed for {family.value}")
    best = int(np.flatnonzero(logliks == np.nanmax(logliks))[0])
    return ProfileResult(
        grid=grid,
        logliks=logliks,
        best_nu=float(grid[best]),
        best_fit=fits[best],
        failed=tuple(failed),
        fits=tuple(fits),
    )


def confidence_band(fit: FitResult, ages, alpha: float = 0.05):
    """Delta-method band ``eta_hat +/- z_{1-alpha/2} sqrt(g' Cov_beta g)``.

    Returns ``(lower, mean, upper)`` arrays over ``ages``.
    """
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    ages = np.atleast_1d(np.asarray(ages, dtype=float))
    if np.any(ages <= 0):
        raise ValueError("ages must be positive")
    if not all(i in fit.free for i in (0, 1, 2)):
        raise ValueError("band needs L_inf, K and t0 to be free parameters")
    cov = fit.covariance()
    pos = [fit.free.index(i) for i in (0, 1, 2)]
    cb = cov[np.ix_(pos, pos)]
    beta = fit.theta_hat.beta
    G = vb_mean_grad(beta, ages)
    var = np.einsum("ij,jk,ik->i", G, cb, G)
    z = float(norm.ppf(1.0 - alpha / 2.0))
    mean = np.atleast_1d(vb_mean(beta, ages))
    half = z * np.sqrt(np.clip(var, 0.0, None))
    return mean - half, mean, mean + half
