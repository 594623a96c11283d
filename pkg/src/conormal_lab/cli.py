"""Command-line front end: flows, return scans, perturbations, spectra.

Artifacts (CSV tables, JSON reports) are written only under the output
directory given by ``--out`` or, failing that, the ``CONORMAL_LAB_OUT``
environment variable.  Without either, subcommands print summaries to
stdout and write nothing.  Data emission is CSV/JSON only; plotting is
left to external tools.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

try:
    import tomllib
except ImportError:  # Python 3.10
    import tomli as tomllib

import numpy as np

from . import conormal, flow, kuznecov, scenarios
from .charts import MODEL_NAMES, make_model, model_from_config
from .conormal import sigma_from_config
from .errors import ConfigError, ConormalLabError
from .flow import DEFAULT_TOL

__all__ = ["build_parser", "main"]

ENV_OUT = "CONORMAL_LAB_OUT"
PROG = "conormal-lab"


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------

def _vec(text: str) -> np.ndarray:
    try:
        return np.asarray([float(v) for v in text.split(",")], float)
    except ValueError:
        raise ConfigError(f"expected comma-separated floats, got {text!r}")


def _load_model(spec: str):
    """Builtin model name, or path to a TOML model config."""
    path = Path(spec)
    if spec.endswith(".toml") or path.is_file():
        return model_from_config(path)
    return make_model(spec)


def _load_sigma(spec: str, chart):
    """Inline JSON object, or path to a TOML file with a [sigma] table."""
    if spec.lstrip().startswith("{"):
        try:
            cfg = json.loads(spec)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"bad inline sigma JSON: {exc}")
    else:
        try:
            with open(spec, "rb") as fh:
                cfg = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"sigma config not found: {spec}")
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"malformed TOML in {spec}: {exc}")
        cfg = cfg.get("sigma", cfg)
    try:
        return sigma_from_config(chart, cfg)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"bad sigma config: {exc}")


def _out_dir(args) -> Path | None:
    root = args.out if args.out is not None else os.environ.get(ENV_OUT)
    if root is None:
        return None
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _add_common(parser, model=True, sigma=False):
    if model:
        parser.add_argument(
            "--model", default="flat_torus", metavar="NAME|FILE",
            help=f"builtin model ({', '.join(MODEL_NAMES)}) or TOML config")
    if sigma:
        parser.add_argument(
            "--sigma", required=True, metavar="JSON|FILE",
            help="target submanifold: inline JSON object or TOML file "
                 "with a [sigma] table")
    parser.add_argument(
        "-o", "--out", default=None, metavar="DIR",
        help="output directory for artifacts (default: $CONORMAL_LAB_OUT; "
             "no writes when unset)")
    parser.add_argument(
        "--tol", type=float, default=DEFAULT_TOL, metavar="EPS",
        help="integrator tolerance")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_flow(args) -> int:
    model = _load_model(args.model)
    x, xi = _vec(args.x), _vec(args.xi)
    if x.size != model.chart.n or xi.size != model.chart.n:
        raise ConfigError(
            f"model {model.name!r} needs {model.chart.n} components in --x/--xi")
    traj = flow.integrate_dense(model.chart, x, xi, args.time, tol=args.tol)
    end = traj.terminal
    print(f"exit {traj.exit_reason} at t = {traj.t_end:.9g}")
    print("x  = " + ", ".join(f"{v:.9g}" for v in end.x))
    print("xi = " + ", ".join(f"{v:.9g}" for v in end.xi))
    out = _out_dir(args)
    if out is not None:
        path = flow.trajectory_to_csv(traj, out / "trajectory.csv",
                                      n_samples=args.samples)
        print(f"wrote {path}")
    return 0


def _scan_returns(args, with_defects: bool) -> int:
    model = _load_model(args.model)
    sigma = _load_sigma(args.sigma, model.chart)
    events = conormal.find_returns(sigma, model.chart, T=args.time,
                                   grid=args.grid, with_defects=with_defects,
                                   tol=args.tol)
    head = "branch  t_return      residual   closed"
    if with_defects:
        head += "  defect"
    print(head)
    for ev in events:
        line = (f"{ev.branch_id:6d}  {ev.t_return:<12.9g}  "
                f"{ev.conormal_residual:<9.3g}  {int(ev.is_closed):6d}")
        if with_defects:
            line += f"  {ev.transversality_defect:.6g}"
        print(line)
    if not events:
        print("(no returns up to the horizon)")
    out = _out_dir(args)
    if out is not None:
        path = conormal.return_table_csv(events, out / "returns.csv")
        print(f"wrote {path}")
    return 0


def _cmd_returns(args) -> int:
    return _scan_returns(args, with_defects=False)


def _cmd_transversality(args) -> int:
    return _scan_returns(args, with_defects=True)


def _run_scenario_like(source, required_op: str, args) -> int:
    scn = scenarios.load_scenario(source)
    if scn.op != required_op:
        raise ConfigError(
            f"config {scn.source} runs operation {scn.op!r}; "
            f"this subcommand requires {required_op!r}")
    out = _out_dir(args)
    report = scenarios.run(scn, out_dir=None if out is None else out / scn.name,
                           seed=args.seed, tol=args.tol)
    print(report.summary())
    return 0 if report.passed else 1


def _cmd_perturb(args) -> int:
    default, op = {
        "diffeo": ("closed_separation", "closed_separation"),
        "conformal": ("loop_break", "loop_break"),
    }[args.family]
    return _run_scenario_like(args.config or default, op, args)


def _cmd_kuznecov(args) -> int:
    if args.surface == "torus":
        series = kuznecov.torus_series(
            sigma_spec={"kind": "line", "level": args.level},
            lambda_max=args.lam_max)
    else:
        series = kuznecov.sphere_series({"kind": "latitude", "u0": args.level},
                                        l_max=int(args.lam_max))
        bound = kuznecov.individual_bound_check(series)
        print(f"individual bound ratio = {bound['ratio']:.6g}")
    fit = kuznecov.fit_leading(series, grid_n=args.grid_n, smooth=args.smooth)
    spec = kuznecov.oscillation_spectrum(fit.grid, fit.residual,
                                         horizon=args.horizon,
                                         smooth=args.smooth)
    print(f"modes = {series.lam.size}, lambda_max = {series.lam_max:.6g}")
    print(f"fit: coefficient = {fit.coefficient:.6g}, "
          f"exponent = {fit.exponent:.6g}")
    times = ", ".join(f"{t:.6g}" for t in spec.peak_times())
    print(f"spectrum peaks (resolution {spec.resolution:.3g}): {times}")
    out = _out_dir(args)
    if out is not None:
        for name, writer, obj in (
                ("series.csv", kuznecov.write_series_csv, series),
                ("residual.csv", kuznecov.write_residual_csv, fit),
                ("peaks.json", kuznecov.write_peaks_json, spec)):
            writer(obj, out / name)
            print(f"wrote {out / name}")
    return 0


def _cmd_scenario_run(args) -> int:
    out = _out_dir(args)
    failed = 0
    for source in args.name:
        scn = scenarios.load_scenario(source)
        report = scenarios.run(
            scn, out_dir=None if out is None else out / scn.name,
            seed=args.seed, tol=args.tol)
        print(report.summary())
        failed += 0 if report.passed else 1
    return 0 if failed == 0 else 1


def _cmd_scenario_list(args) -> int:
    for name in scenarios.list_builtin():
        scn = scenarios.load_scenario(name)
        print(f"{name:24s} {scn.claim}")
    return 0


def _cmd_verify_all(args) -> int:
    out = _out_dir(args)
    reports = scenarios.verify_all(out_dir=out, workers=args.workers,
                                   tol=args.tol)
    n_pass = 0
    for report in reports:
        if report.passed:
            n_pass += 1
            print(f"ok   {report.name:24s} ({len(report.checks)} checks)")
        else:
            print(report.summary())
    print(f"{n_pass}/{len(reports)} scenarios passed")
    return 0 if n_pass == len(reports) else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    """Construct the argument parser for the ``conormal-lab`` tool."""
    parser = argparse.ArgumentParser(
        prog=PROG,
        description="Geodesic flows, conormal return scans, metric "
                    "perturbations, and weighted spectral counting.",
        epilog="Exit codes: 0 all verdicts pass, 1 a threshold failed, "
               "2 bad configuration.")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="COMMAND")

    p = sub.add_parser("flow", help="integrate one geodesic and dump it")
    p.add_argument("--x", required=True, metavar="V", help="start point")
    p.add_argument("--xi", required=True, metavar="V", help="start covector")
    p.add_argument("-T", "--time", type=float, required=True, help="flow time")
    p.add_argument("--samples", type=int, default=201,
                   help="rows in trajectory.csv")
    _add_common(p)
    p.set_defaults(func=_cmd_flow)

    p = sub.add_parser("returns", help="scan conormal returns to a target set")
    p.add_argument("-T", "--time", type=float, default=10.0, help="horizon")
    p.add_argument("--grid", type=int, default=64, help="starts along sigma")
    _add_common(p, sigma=True)
    p.set_defaults(func=_cmd_returns)

    p = sub.add_parser("transversality",
                       help="return scan with transversality defects")
    p.add_argument("-T", "--time", type=float, default=10.0, help="horizon")
    p.add_argument("--grid", type=int, default=64, help="starts along sigma")
    _add_common(p, sigma=True)
    p.set_defaults(func=_cmd_transversality)

    p = sub.add_parser("perturb",
                       help="apply a perturbation and verify its effect")
    p.add_argument("family", choices=("diffeo", "conformal"),
                   help="diffeo: separate a closed geodesic from its target "
                        "set; conformal: break a degenerate return loop")
    p.add_argument("--config", default=None, metavar="FILE",
                   help="scenario config override (default: builtin)")
    p.add_argument("--seed", type=int, default=None, help="RNG seed override")
    _add_common(p, model=False)
    p.set_defaults(func=_cmd_perturb)

    p = sub.add_parser("kuznecov",
                       help="weighted eigenvalue series, fit, and spectrum")
    p.add_argument("surface", choices=("torus", "sphere"))
    p.add_argument("--lambda-max", dest="lam_max", type=float, default=None,
                   help="eigenvalue cutoff (torus: 500; sphere: degree 200)")
    p.add_argument("--level", type=float, default=0.0,
                   help="line level (torus) or latitude height (sphere)")
    p.add_argument("--grid-n", type=int, default=16384,
                   help="counting grid size")
    p.add_argument("--smooth", type=float, default=0.03,
                   help="mollifier width for the spectrum")
    p.add_argument("--horizon", type=float, default=20.0,
                   help="largest oscillation time reported")
    _add_common(p, model=False)
    p.set_defaults(func=_cmd_kuznecov)

    p = sub.add_parser("scenario", help="run or list packaged scenarios")
    scen_sub = p.add_subparsers(dest="action", required=True,
                                metavar="ACTION")
    pr = scen_sub.add_parser("run", help="run scenarios by name or config path")
    pr.add_argument("name", nargs="+", help="builtin name or TOML path")
    pr.add_argument("--seed", type=int, default=None, help="RNG seed override")
    _add_common(pr, model=False)
    pr.set_defaults(func=_cmd_scenario_run)
    pl = scen_sub.add_parser("list", help="list builtin scenarios")
    pl.set_defaults(func=_cmd_scenario_list)

    p = sub.add_parser("verify", help="run the full acceptance suite")
    ver_sub = p.add_subparsers(dest="what", required=True, metavar="WHAT")
    pv = ver_sub.add_parser("all", help="every builtin scenario")
    pv.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                    metavar="N",
                    help="parallel scenario processes "
                         "(default: available parallelism)")
    _add_common(pv, model=False)
    pv.set_defaults(func=_cmd_verify_all)

    return parser


def main(argv=None) -> int:
    """Entry point; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else int(exc.code)
    if args.command == "kuznecov" and args.lam_max is None:
        args.lam_max = 500.0 if args.surface == "torus" else 200.0
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"{PROG}: config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError) as exc:
        print(f"{PROG}: config error: {exc}", file=sys.stderr)
        return 2
    except ConormalLabError as exc:
        print(f"{PROG}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
