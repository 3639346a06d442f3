"""End-to-end fitting protocol and report emission.

For each family: profile nu (T/ST only), fit, local influence, refit without
the influential cases, relative change of the growth parameters; then rank
the families by AIC. Results go to ``report.json`` plus TSV sidecars.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import load_csv
from .distributions import mix_moments
from .estimation import FitConfig, FitError, FitResult, ProfileResult, confidence_band, fit, profile_nu
from .influence import InfluenceReport, RCReport, filter_and_refit, influence_analysis, relative_change
from .model import PARAM_NAMES, Family, GrowthDataset, LikelihoodError, ModelSpec, vb_mean

log = logging.getLogger(__name__)

SCHEMA_VERSION = "1.0"
ALL_FAMILIES = ("N", "SN", "T", "ST")
_SIG = 10

__all__ = [
    "SCHEMA_VERSION",
    "RunConfig",
    "FamilyRun",
    "RunReport",
    "run_protocol",
    "run_family",
    "emit_plot_data",
    "write_report",
    "fit_summary",
    "format_summary",
    "report_json",
]


def _num(x):
    """Round to a fixed number of significant digits so reports are stable and compact."""
    if x is None:
        return None
    x = float(x)
    if not np.isfinite(x):
        return None
    return float(f"{x:.{_SIG}g}")


@dataclass(frozen=True)
class RunConfig:
    input: str | None = None
    families: tuple = ALL_FAMILIES
    nu_min: float = 3.0
    nu_max: float = 60.0
    nu_step: float = 1.0
    tau: float = 2.0
    alpha: float = 0.05
    seed: int = 0
    outdir: str | None = None
    n_starts: int = 5
    band_points: int = 60
    influence_method: str = "basis"
    fixed_nu: float | None = None

    def __post_init__(self):
        fams = tuple(Family(f).value for f in self.families)
        if not fams:
            raise ValueError("at least one family is required")
        object.__setattr__(self, "families", fams)
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.nu_min <= 2 or self.nu_max < self.nu_min or self.nu_step <= 0:
            raise ValueError("nu grid must satisfy 2 < nu_min <= nu_max and nu_step > 0")

    def fit_config(self) -> FitConfig:
        return FitConfig.grid(self.nu_min, self.nu_max, self.nu_step, n_starts=self.n_starts, seed=self.seed)


@dataclass(eq=False)
class FamilyRun:
    family: str
    fit: FitResult | None = None
    profile: ProfileResult | None = None
    influence: InfluenceReport | None = None
    filtered: FitResult | None = None
    rc: RCReport | None = None
    band: tuple | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass(eq=False)
class RunReport:
    config: RunConfig
    data: GrowthDataset
    runs: dict = field(default_factory=dict)

    @property
    def failed(self) -> list[str]:
        return [k for k, r in self.runs.items() if not r.ok]

    def ranking(self) -> list[dict]:
        rows = [
            {"family": k, "nu": r.fit.spec.nu, "q": r.fit.q, "loglik": r.fit.loglik, "aic": r.fit.aic}
            for k, r in self.runs.items()
            if r.ok
        ]
        return sorted(rows, key=lambda r: (r["aic"], ALL_FAMILIES.index(r["family"])))

    def to_dict(self) -> dict:
        cfg = self.config
        return {
            "schema_version": SCHEMA_VERSION,
            "input": {"path": cfg.input, "n": self.data.n},
            "config": {
                "families": list(cfg.families),
                "nu_grid": {"min": cfg.nu_min, "max": cfg.nu_max, "step": cfg.nu_step},
                "tau": cfg.tau,
                "alpha": cfg.alpha,
                "seed": cfg.seed,
                "n_starts": cfg.n_starts,
                "influence_method": cfg.influence_method,
            },
            "families": {k: _family_dict(r, cfg.alpha) for k, r in self.runs.items()},
            "aic_ranking": [
                {"rank": i + 1, "family": r["family"], "nu": r["nu"], "q": r["q"],
                 "loglik": _num(r["loglik"]), "aic": _num(r["aic"])}
                for i, r in enumerate(self.ranking())
            ],
        }


def fit_summary(f: FitResult) -> dict:
    th = f.theta_hat.as_array()
    kap = mix_moments(f.spec)
    se = {PARAM_NAMES[i]: (_num(f.std_error(PARAM_NAMES[i])) if f.info_pd else None) for i in f.spec.active}
    return {
        "family": f.spec.family.value,
        "nu": f.spec.nu,
        "q": f.q,
        "n": f.n_used,
        "params": {PARAM_NAMES[i]: _num(th[i]) for i in f.spec.active},
        "std_errors": se,
        "std_errors_available": bool(f.info_pd),
        "kappa1": _num(kap.kappa1),
        "kappa2": _num(kap.kappa2),
        "loglik": _num(f.loglik),
        "aic": _num(f.aic),
        "converged": bool(f.converged),
        "iterations": int(f.iterations),
        "grad_max": _num(f.grad_max),
    }


def _rc_entry(full, filtered, any_removed):
    # RC is recomputed from the rounded estimates so the report is self-consistent
    full, filtered = _num(full), _num(filtered)
    rc = float(relative_change(full, filtered)) if any_removed else 0.0
    return {"full": full, "filtered": filtered, "rc_percent": _num(rc)}


def _family_dict(r: FamilyRun, alpha: float) -> dict:
    if not r.ok:
        return {"status": "failed", "error": r.error}
    out = {"status": "ok", "fit": fit_summary(r.fit)}
    if r.profile is not None:
        out["profile"] = {
            "best_nu": r.profile.best_nu,
            "grid": [float(v) for v in r.profile.grid],
            "loglik": [_num(v) for v in r.profile.logliks],
            "failed": list(r.profile.failed),
        }
    if r.influence is not None:
        inf = r.influence
        out["influence"] = {
            "method": inf.method,
            "tau": inf.tau,
            "m0_bar": _num(inf.m0_bar),
            "var_m0": _num(inf.var_m0),
            "benchmark": _num(inf.benchmark),
            "lambda_max": _num(inf.lambda_max),
            "n_influential": len(inf.influential),
            "influential": list(inf.influential),
        }
    if r.rc is not None:
        out["filtered_fit"] = fit_summary(r.filtered)
        out["relative_change"] = {
            "n_full": r.rc.n_full,
            "n_filtered": r.rc.n_filtered,
            "removed_percent": _num(r.rc.removed_percent),
            "params": {
                e.name: _rc_entry(e.full, e.filtered, bool(r.rc.removed))
                for e in r.rc.entries
            },
        }
    if r.band is not None:
        ages, lo, mid, hi = r.band
        out["band"] = {
            "alpha": alpha,
            "age": [_num(v) for v in ages],
            "lower": [_num(v) for v in lo],
            "mean": [_num(v) for v in mid],
            "upper": [_num(v) for v in hi],
        }
    return out


def run_family(family: str, data: GrowthDataset, config: RunConfig, influence: bool = True) -> FamilyRun:
    """Steps 1-3 of the protocol for a single family.

    With ``config.fixed_nu`` set, T/ST are fitted at that nu instead of profiled.
    """
    fam = Family(family)
    fc = config.fit_config()
    run = FamilyRun(fam.value)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            if fam.is_mixture and config.fixed_nu is None:
                run.profile = profile_nu(fam, data, fc)
                run.fit = run.profile.best_fit
            else:
                nu = config.fixed_nu if fam.is_mixture else None
                run.fit = fit(ModelSpec(fam, nu), data, fc)
        if run.fit.info_pd:
            if influence:
                run.influence = influence_analysis(run.fit, data, config.tau, config.influence_method)
                run.filtered, run.rc = filter_and_refit(run.fit, data, run.influence, fc)
            ages = np.linspace(float(data.ages.min()), float(data.ages.max()), config.band_points)
            run.band = (ages, *confidence_band(run.fit, ages, config.alpha))
    except (FitError, LikelihoodError, np.linalg.LinAlgError, ValueError) as exc:
        log.error("family %s failed: %s", fam.value, exc)
        run.error = f"{type(exc).__name__}: {exc}"
    return run


def run_protocol(config: RunConfig, data: GrowthDataset | None = None) -> RunReport:
    """Run every configured family; writes outputs when ``config.outdir`` is set."""
    if data is None:
        if config.input is None:
            raise ValueError("no input data")
        data = load_csv(config.input)
    report = RunReport(config, data)
    for fam in config.families:
        report.runs[fam] = run_family(fam, data, config)
    if config.outdir is not None:
        write_report(report, config.outdir)
    return report


def report_json(report: RunReport) -> str:
    return json.dumps(report.to_dict(), indent=2) + "\n"


def write_report(report: RunReport, outdir) -> list[Path]:
    """Write ``report.json`` and the TSV sidecars; all computation is done beforehand."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    text = report_json(report)
    paths = emit_plot_data(report, out)
    p = out / "report.json"
    p.write_text(text, encoding="utf-8")
    return [p, *paths]


def _tsv(path: Path, header, rows):
    with path.open("w", encoding="utf-8") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(_cell(v) for v in row) + "\n")


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    v = _num(v)
    return "nan" if v is None else repr(v)


def emit_plot_data(report: RunReport, outdir) -> list[Path]:
    """Write per-family TSV files.

    ``profile_<F>.tsv``    nu, loglik, status (T and ST only)
    ``curve_<F>.tsv``      age, lower, mean, upper
    ``influence_<F>.tsv``  index, age, length, B, benchmark, influential
    ``residuals_<F>.tsv``  index, age, length, fitted, residual

    Indices are zero-based positions in the input data.
    """
    out = Path(outdir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    data = report.data
    written = []
    for fam, r in report.runs.items():
        if not r.ok:
            continue
        if r.profile is not None:
            p = out / f"profile_{fam}.tsv"
            rows = [
                (float(nu), ll, "ok" if np.isfinite(ll) else "failed")
                for nu, ll in zip(r.profile.grid, r.profile.logliks)
            ]
            _tsv(p, ("nu", "loglik", "status"), rows)
            written.append(p)
        if r.band is not None:
            p = out / f"curve_{fam}.tsv"
            _tsv(p, ("age", "lower", "mean", "upper"), zip(*r.band))
            written.append(p)
        if r.influence is not None:
            p = out / f"influence_{fam}.tsv"
            flagged = set(r.influence.influential)
            rows = [
                (t, data.ages[t], data.lengths[t], r.influence.B[t], r.influence.benchmark, t in flagged)
                for t in range(data.n)
            ]
            _tsv(p, ("index", "age", "length", "B", "benchmark", "influential"), rows)
            written.append(p)
        p = out / f"residuals_{fam}.tsv"
        fitted = np.asarray(vb_mean(r.fit.theta_hat.beta, data.ages))
        rows = [(t, data.ages[t], data.lengths[t], fitted[t], data.lengths[t] - fitted[t]) for t in range(data.n)]
        _tsv(p, ("index", "age", "length", "fitted", "residual"), rows)
        written.append(p)
    return written


def _fmt(v):
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.{_SIG}g}"
    return str(v)


def format_summary(report_dict: dict) -> str:
    """Human-readable digest built only from values present in the JSON report."""
    lines = [f"n = {report_dict['input']['n']}"]
    for fam, d in report_dict["families"].items():
        if d["status"] != "ok":
            lines.append(f"[{fam}] FAILED: {d['error']}")
            continue
        f = d["fit"]
        head = f"[{fam}]" + (f" nu={_fmt(f['nu'])}" if f["nu"] is not None else "")
        lines.append(f"{head} loglik={_fmt(f['loglik'])} aic={_fmt(f['aic'])} q={f['q']}")
        for name, val in f["params"].items():
            lines.append(f"    {name:<7} {_fmt(val):>16}  se {_fmt(f['std_errors'][name])}")
        if "influence" in d:
            inf = d["influence"]
            lines.append(
                f"    influential {inf['n_influential']} (benchmark {_fmt(inf['benchmark'])}, tau {_fmt(inf['tau'])})"
            )
        if "relative_change" in d:
            rc = d["relative_change"]["params"]
            lines.append("    RC% " + "  ".join(f"{k}={_fmt(v['rc_percent'])}" for k, v in rc.items()))
    lines.append("AIC ranking:")
    for r in report_dict["aic_ranking"]:
        lines.append(f"  {r['rank']}. {r['family']} aic={_fmt(r['aic'])} loglik={_fmt(r['loglik'])}")
    return "\n".join(lines)
