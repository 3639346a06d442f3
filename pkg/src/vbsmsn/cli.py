"""Command-line interface.

Exit codes: 0 success, 1 one or more families failed, 2 invalid input or
configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from .dataio import AGE_BINS, DataError, describe, generate_synthetic, load_csv, save_csv
from .estimation import FitError, profile_nu
from .model import Family, ModelSpec, ThetaVB
from .protocol import (
    ALL_FAMILIES,
    RunConfig,
    RunReport,
    emit_plot_data,
    fit_summary,
    format_summary,
    report_json,
    run_family,
    run_protocol,
    write_report,
)

EXIT_OK, EXIT_PARTIAL, EXIT_INVALID = 0, 1, 2

# Reference skew-t parameters (nu = 51) used as the default simulation truth.
DEFAULT_TRUTH = dict(L_inf=35.137, K=0.083, t0=-3.075, sigma2=38.087, rho=-0.705, lam=0.873, nu=51.0)


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--tau", type=float, default=2.0, help="benchmark multiplier for influence")
    p.add_argument("--nu-min", type=float, default=3.0)
    p.add_argument("--nu-max", type=float, default=60.0)
    p.add_argument("--nu-step", type=float, default=1.0)
    p.add_argument("--alpha", type=float, default=0.05, help="band significance level")
    p.add_argument("--families", default=",".join(ALL_FAMILIES), help="comma-separated subset of N,SN,T,ST")
    p.add_argument("--n-starts", type=int, default=5)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    g = _global_flags()
    parser = argparse.ArgumentParser(prog="vbsmsn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[g], help="full protocol over all families")
    p.add_argument("input")

    for name, hlp in (("fit", "fit one family"), ("diagnose", "fit, influence analysis and filtered refit")):
        p = sub.add_parser(name, parents=[g], help=hlp)
        p.add_argument("input")
        p.add_argument("--family", required=True, choices=[f.value for f in Family])
        p.add_argument("--nu", type=float, default=None, help="fixed nu for T/ST (profiled when omitted)")

    p = sub.add_parser("profile", parents=[g], help="profile log-likelihood over the nu grid")
    p.add_argument("input")
    p.add_argument("--family", required=True, choices=["T", "ST"])

    p = sub.add_parser("describe", parents=[g], help="length summaries by age class")
    p.add_argument("input")

    p = sub.add_parser("simulate", parents=[g], help="write a synthetic age,length CSV")
    p.add_argument("--family", default="ST", choices=[f.value for f in Family])
    p.add_argument("--n", type=int, default=2687)
    p.add_argument("--age-min", type=float, default=3.0)
    p.add_argument("--age-max", type=float, default=61.0)
    for k, v in DEFAULT_TRUTH.items():
        p.add_argument(f"--{k.replace('_', '-')}", dest=k, type=float, default=v)
    p.add_argument("--floor", type=float, default=None, help="clip lengths below this value")
    p.add_argument("-o", "--output", default=None, help="CSV path (default <out>/synthetic.csv)")
    return parser


def _config(args, **kw) -> RunConfig:
    opts = dict(
        input=getattr(args, "input", None),
        families=tuple(f.strip() for f in args.families.split(",") if f.strip()),
        nu_min=args.nu_min,
        nu_max=args.nu_max,
        nu_step=args.nu_step,
        tau=args.tau,
        alpha=args.alpha,
        seed=args.seed,
        outdir=args.out,
        n_starts=args.n_starts,
    )
    opts.update(kw)
    return RunConfig(**opts)


def _cmd_run(args) -> int:
    cfg = _config(args)
    report = run_protocol(cfg)
    print(format_summary(report.to_dict()))
    if len(report.failed) == len(report.runs):
        print("all families failed", file=sys.stderr)
    return EXIT_PARTIAL if report.failed else EXIT_OK


def _single(args, with_influence: bool) -> int:
    cfg = _config(args, families=(args.family,), fixed_nu=args.nu)
    data = load_csv(args.input)
    run = run_family(args.family, data, cfg, influence=with_influence)
    report = RunReport(cfg, data, {args.family: run})
    if not run.ok:
        print(run.error, file=sys.stderr)
        return EXIT_PARTIAL
    if with_influence:
        if cfg.outdir:
            write_report(report, cfg.outdir)
        print(format_summary(report.to_dict()))
    else:
        text = json.dumps(fit_summary(run.fit), indent=2)
        if cfg.outdir:
            out = Path(cfg.outdir)
            out.mkdir(parents=True, exist_ok=True)
            (out / f"fit_{args.family}.json").write_text(text + "\n", encoding="utf-8")
            emit_plot_data(report, out)
        print(text)
    return EXIT_OK


def _cmd_profile(args) -> int:
    cfg = _config(args, families=(args.family,))
    data = load_csv(args.input)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        prof = profile_nu(args.family, data, cfg.fit_config())
    print("nu\tloglik")
    for nu, ll in zip(prof.grid, prof.logliks):
        print(f"{nu:g}\t{ll:.10g}")
    print(f"best nu: {prof.best_nu:g}")
    if cfg.outdir:
        from .protocol import FamilyRun

        run = FamilyRun(args.family, fit=prof.best_fit, profile=prof)
        emit_plot_data(RunReport(cfg, data, {args.family: run}), cfg.outdir)
    return EXIT_OK


def _cmd_describe(args) -> int:
    data = load_csv(args.input)
    rows = describe(data, AGE_BINS)
    cols = ("ages", "min", "max", "mean", "sd", "n", "proportion")
    lines = ["\t".join(cols)]
    for r in rows:
        lines.append("\t".join("-" if r[c] is None else (f"{r[c]:.6g}" if isinstance(r[c], float) else str(r[c])) for c in cols))
    text = "\n".join(lines) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "describe.tsv").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def _cmd_simulate(args) -> int:
    fam = Family(args.family)
    spec = ModelSpec(fam, args.nu if fam.is_mixture else None)
    theta = ThetaVB(args.L_inf, args.K, args.t0, args.sigma2, args.rho, args.lam if fam.is_skew else 0.0)
    if args.n < 1 or not 0 < args.age_min < args.age_max:
        raise ValueError("need n >= 1 and 0 < age-min < age-max")
    rng = np.random.default_rng(args.seed)
    ages = rng.uniform(args.age_min, args.age_max, args.n)
    data = generate_synthetic(theta, spec, ages, rng, floor=args.floor)
    path = Path(args.output) if args.output else Path(args.out or ".") / "synthetic.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_csv(data, path)
    print(f"wrote {data.n} rows to {path}")
    return EXIT_OK


_COMMANDS = {
    "run": _cmd_run,
    "fit": lambda a: _single(a, with_influence=False),
    "diagnose": lambda a: _single(a, with_influence=True),
    "profile": _cmd_profile,
    "describe": _cmd_describe,
    "simulate": _cmd_simulate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except (DataError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FitError as exc:
        print(f"fit failed: {exc}", file=sys.stderr)
        return EXIT_PARTIAL
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
