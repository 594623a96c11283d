"""Reproducible end-to-end experiments over the library's models.

A scenario is a TOML config naming a model, an optional submanifold, one
operation with its parameters, and numeric thresholds.  ``run`` executes
the operation, evaluates every threshold, writes artifacts when an output
directory is given, and returns a structured report whose JSON form is
byte-stable: all randomness is seeded from the config and nothing
time-dependent enters the output, so re-running a scenario reproduces its
artifact bytes exactly.

Thresholds live in the config files rather than in code so acceptance
tuning stays auditable; the builtin configs ship with the package under
``scenario_configs/``.
"""

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import charts, conformal, conormal, diffeo, kuznecov
from .charts import make_model
from .errors import ConfigError, PerturbationError
from .flow import DEFAULT_TOL, PhasePoint

__all__ = [
    "CheckOutcome",
    "Scenario",
    "ScenarioReport",
    "builtin_config_path",
    "list_builtin",
    "load_scenario",
    "run",
    "verify_all",
]

SCHEMA_VERSION = 1

_BUILTIN_ORDER = [
    "pullback_jacobian",
    "axis_response",
    "transverse_response",
    "remainder_order",
    "endpoint_surjectivity",
    "tail_targeting",
    "second_pass_cancellation",
    "return_scan",
    "closed_separation",
    "loop_break",
    "torus_kuznecov",
    "sphere_kuznecov",
    "frequency_match",
]

_CONFIG_DIR = Path(__file__).parent / "scenario_configs"


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CheckOutcome:
    """One thresholded quantity of a scenario run."""

    name: str
    value: float
    low: Optional[float]
    high: Optional[float]
    passed: bool

    def to_dict(self):
        return {"name": self.name, "value": float(self.value),
                "low": self.low, "high": self.high,
                "passed": bool(self.passed)}


def _check(name, value, low=None, high=None):
    value = float(value)
    ok = np.isfinite(value)
    if low is not None:
        ok = ok and value >= float(low)
    if high is not None:
        ok = ok and value <= float(high)
    return CheckOutcome(name=name, value=value,
                        low=None if low is None else float(low),
                        high=None if high is None else float(high),
                        passed=bool(ok))


@dataclass
class ScenarioReport:
    """Pass/fail verdicts and artifact names from one scenario run."""

    name: str
    claim: str
    passed: bool
    checks: list
    artifacts: list
    meta: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "schema": SCHEMA_VERSION,
            "name": self.name,
            "claim": self.claim,
            "passed": bool(self.passed),
            "checks": [c.to_dict() for c in self.checks],
            "artifacts": sorted(self.artifacts),
            "meta": self.meta,
        }

    def write_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def summary(self) -> str:
        head = "PASS" if self.passed else "FAIL"
        lines = [f"{head} {self.name}: {self.claim}"]
        for c in self.checks:
            mark = "ok " if c.passed else "BAD"
            bounds = []
            if c.low is not None:
                bounds.append(f">= {c.low:g}")
            if c.high is not None:
                bounds.append(f"<= {c.high:g}")
            lines.append(f"  [{mark}] {c.name} = {c.value:.6g}"
                         + (f"  ({', '.join(bounds)})" if bounds else ""))
        return "\n".join(lines)


@dataclass
class Scenario:
    """A validated scenario config ready to run."""

    name: str
    claim: str
    seed: int
    model_cfg: Optional[dict]
    sigma_cfg: Optional[dict]
    operation: dict
    thresholds: dict
    source: str

    @property
    def op(self) -> str:
        return self.operation["op"]


_TOP_KEYS = {"schema", "name", "claim", "seed", "model", "sigma",
             "operation", "thresholds"}


def list_builtin():
    """Names of the shipped scenario configs, in canonical order."""
    return list(_BUILTIN_ORDER)


def builtin_config_path(name: str) -> Path:
    """Filesystem path of a shipped scenario config."""
    if name not in _BUILTIN_ORDER:
        raise ConfigError(
            f"unknown builtin scenario {name!r}; choose from {_BUILTIN_ORDER}")
    return _CONFIG_DIR / f"{name}.toml"


def load_scenario(source) -> Scenario:
    """Read and validate a scenario from a TOML path, dict, or builtin name."""
    if isinstance(source, str) and source in _BUILTIN_ORDER:
        source = builtin_config_path(source)
    if isinstance(source, dict):
        cfg, origin = dict(source), "<dict>"
    else:
        p = Path(source)
        try:
            with open(p, "rb") as fh:
                cfg = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"scenario config not found: {p}")
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"malformed TOML in {p}: {exc}") from exc
        origin = str(p)
    extra = set(cfg) - _TOP_KEYS
    if extra:
        raise ConfigError(f"unknown keys {sorted(extra)} in scenario config")
    if cfg.get("schema") != SCHEMA_VERSION:
        raise ConfigError(f"scenario config must declare schema = {SCHEMA_VERSION}")
    for key in ("name", "claim"):
        if not isinstance(cfg.get(key), str) or not cfg[key]:
            raise ConfigError(f"scenario config requires a string {key!r}")
    op = cfg.get("operation")
    if not isinstance(op, dict) or "op" not in op:
        raise ConfigError("scenario config requires [operation] with an op name")
    if op["op"] not in _RUNNERS:
        raise ConfigError(
            f"unknown operation {op['op']!r}; choose from {sorted(_RUNNERS)}")
    return Scenario(
        name=cfg["name"], claim=cfg["claim"], seed=int(cfg.get("seed", 0)),
        model_cfg=cfg.get("model"), sigma_cfg=cfg.get("sigma"),
        operation=dict(op), thresholds=dict(cfg.get("thresholds", {})),
        source=origin)


@dataclass
class _Ctx:
    out_dir: Optional[Path]
    seed: int
    tol: float
    thresholds: dict
    artifacts: list = field(default_factory=list)

    def path(self, name: str) -> Optional[Path]:
        if self.out_dir is None:
            return None
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.artifacts.append(name)
        return self.out_dir / name

    def bound(self, key: str, default=None):
        v = self.thresholds.get(key, default)
        return None if v is None else float(v)


def _model_chart(scn: Scenario):
    if scn.model_cfg is None:
        raise ConfigError(f"scenario {scn.name!r} requires a [model] table")
    mdl = dict(scn.model_cfg)
    name = mdl.pop("name", None)
    if name is None:
        raise ConfigError("[model] requires a name")
    return make_model(name, **mdl).chart


def _need(cfg: dict, key: str):
    if key not in cfg:
        raise ConfigError(f"operation requires the key {key!r}")
    return cfg[key]


def _no_extras(cfg: dict, where: str):
    if cfg:
        raise ConfigError(f"unknown keys {sorted(cfg)} in {where}")


# ---------------------------------------------------------------------------
# operation runners
# ---------------------------------------------------------------------------

def _run_pullback_jacobian(scn: Scenario, ctx: _Ctx):
    cfg = dict(scn.operation)
    cfg.pop("op")
    n_points = int(cfg.pop("n_points", 100))
    fd_step = float(cfg.pop("fd_step", 1e-5))
    _no_extras(cfg, "operation")

    n = 2
    rng = np.random.default_rng(ctx.seed)
    xs = rng.uniform(0.0, 2.0 * np.pi, size=(n_points, n))
    angles = rng.uniform(0.0, 2.0 * np.pi, size=n_points)
    mags = rng.uniform(0.5, 2.0, size=n_points)
    base = diffeo.DiffeoParams(a=np.zeros(n), b=np.zeros((n, n)),
                               center=np.zeros(n), r1=20.0, r2=40.0)

    worst = 0.0
    min_rank = 2 * n
    rows = []
    for k in range(n_points):
        x = xs[k]
        xi = mags[k] * np.array([np.cos(angles[k]), np.sin(angles[k])])
        p = PhasePoint(x, xi)
        J = diffeo.tau_F_param_jacobian(p, params=base)
        rank = int(np.linalg.matrix_rank(J, tol=1e-10))
        min_rank = min(min_rank, rank)
        dev = 0.0
        for col in range(n + n * n):
            vec = np.zeros(n + n * n)
            vec[col] = fd_step
            plus = diffeo.DiffeoParams(
                a=vec[:n], b=vec[n:].reshape(n, n),
                center=np.zeros(n), r1=20.0, r2=40.0)
            minus = plus.scaled(-1.0)
            qp = diffeo.tau_F(plus, p, mode="closed")
            qm = diffeo.tau_F(minus, p, mode="closed")
            fd = np.concatenate([qp.x - qm.x, qp.xi - qm.xi]) / (2.0 * fd_step)
            dev = max(dev, float(np.max(np.abs(fd - J[:, col]))))
        worst = max(worst, dev)
        rows.append((k, dev, rank))

    try:
        diffeo.tau_F_param_jacobian(PhasePoint(xs[0], np.zeros(n)), params=base)
        rejected = 0.0
    except PerturbationError:
        rejected = 1.0

    path = ctx.path("jacobian_check.csv")
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("point,fd_deviation,rank\n")
            for k, dev, rank in rows:
                fh.write(f"{k},{dev!r},{rank}\n")

    checks = [
        _check("max_fd_deviation", worst, high=ctx.bound("fd_dev_max", 1e-6)),
        _check("min_rank", min_rank, low=2 * n),
        _check("zero_covector_rejected", rejected, low=1.0),
    ]
    return checks, {"n_points": n_points}


def _response_profiles(family: str):
    # distinct profiles come from distinct tube widths; transverse
    # responses exist for each of the two transverse parameter slots
    if family == "axis":
        return [(0, w) for w in (0.15, 0.2, 0.25)]
    if family == "transverse":
        return [(1, 0.15), (1, 0.2), (1, 0.25), (2, 0.2), (2, 0.25)]
    raise ConfigError(f"unknown response family {family!r}")


def _run_response_closed_form(scn: Scenario, ctx: _Ctx):
    cfg = dict(scn.operation)
    cfg.pop("op")
    family = str(_need(cfg, "family"))
    cfg.pop("family")
    _no_extras(cfg, "operation")

    n = 2
    flat = conformal._identity_strip_chart(n)
    t_grid = np.linspace(0.0, 1.0, 101)
    rows = []
    worst = 0.0
    for j, width in _response_profiles(family):
        bumps = conformal.build_bumps(tube=width)
        params = conformal.ConformalParams(np.zeros(2 * n - 1), 0.0, bumps, n)
        resp = conformal.linear_response(flat, params, j, t_grid, tol=ctx.tol)
        ref = conformal.closed_form_response(params, j, t_grid)
        dev = max(float(np.max(np.abs(resp.dx_ds - ref.dx_ds))),
                  float(np.max(np.abs(resp.dxi_ds - ref.dxi_ds))))
        worst = max(worst, dev)
        rows.append((j, width, dev))

    path = ctx.path(f"response_{family}.csv")
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("component,tube,max_deviation\n")
            for j, width, dev in rows:
                fh.write(f"{j},{width!r},{dev!r}\n")

    checks = [
        _check("n_profiles", len(rows), low=3 if family == "axis" else 5),
        _check("max_deviation", worst, high=ctx.bound("dev_max", 1e-8)),
    ]
    return checks, {"family": family}


def _run_remainder_order(scn: Scenario, ctx: _Ctx):
    cfg = dict(scn.operation)
    cfg.pop("op")
    eps_list = [float(e) for e in cfg.pop("epsilons", (0.2, 0.1, 0.05, 0.025))]
    j = int(cfg.pop("component", 1))
    tube_width = float(cfg.pop("tube", 0.2))
    _no_extras(cfg, "operation")

    chart = _model_chart(scn)
    bumps = conformal.build_bumps(tube=tube_width)
    curve = conformal.epsilon_error_curve(chart, bumps, eps_list, j=j,
                                          tol=ctx.tol)
    path = ctx.path("epsilon_curve.csv")
    if path is not None:
        conformal.epsilon_curve_csv(curve, path)

    lo = ctx.bound("slope_low", 1.85)
    hi = ctx.bound("slope_high", 2.15)
    checks = [
        _check("slope_x", curve["slope_x"], low=lo, high=hi),
        _check("slope_xi", curve["slope_xi"], low=lo, high=hi),
    ]
    return checks, {"component": j, "eps": eps_list}


def _run_endpoint_surjectivity(scn: Scenario, ctx: _Ctx):
    cfg = dict(scn.operation)
    cfg.pop("op")
    eps_list = [float(e) for e in cfg.pop("epsilons", (0.2, 0.1, 0.05, 0.025))]
    tube_width = float(cfg.pop("tube", 0.2))
    _no_extras(cfg, "operation")

    chart = _model_chart(scn)
    bumps = conformal.build_bumps(tube=tube_width)
    n = 2
    devs, sig_small = [], []
    rows = []
    for eps in eps_list:
        chart_eps = charts.scale_chart(chart, eps)
        params = conformal.ConformalParams(np.zeros(2 * n - 1), eps, bumps, n)
        rep = conformal.endpoint_jacobian(chart_eps, params, tol=ctx.tol)
        devs.append(rep.s_block_deviation)
        if eps <= 0.05:
            sig_small.append(rep.sigma_min)
        rows.append((eps, rep.s_block_deviation, rep.sigma_min))

    slope = float(np.polyfit(np.log(eps_list), np.log(devs), 1)[0])
    path = ctx.path("endpoint_scaling.csv")
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("epsilon,s_block_deviation,sigma_min\n")
            for eps, dev, sig in rows:
                fh.write(f"{eps!r},{dev!r},{sig!r}\n")
            fh.write(f"# slope,{slope!r}\n")

    checks = [
        _check("deviation_slope", slope, low=ctx.bound("slope_low", 1.85),
               high=ctx.bound("slope_high", 2.15)),
        _check("sigma_min_small_eps", min(sig_small),
               low=ctx.bound("sigma_min", 0.1)),
    ]
    return checks, {"eps": eps_list}


def _scan_event(scn: Scenario, ctx: _Ctx, cfg: dict):
    """Shared oval setup: scan the configured submanifold, pick one event."""
    chart = _model_chart(scn)
    if scn.sigma_cfg is None:
        raise ConfigError(f"scenario {scn.name!r} requires a [sigma] table")
    sigma = conormal.sigma_from_config(chart, scn.sigma_cfg)
    T = float(cfg.pop("horizon", 1.1))
    grid = int(cfg.pop("grid", 32))
    t_target = float(_need(cfg, "t_target"))
    cfg.pop("t_target")
    s_target = float(_need(cfg, "sigma_target"))
    cfg.pop("sigma_target")
    events = conormal.find_returns(sigma, chart, T=T, grid=grid,
                                   with_defects=True, tol=ctx.tol)
    near = [ev for ev in events
            if abs(ev.t_return - t_target) <= 0.05
            and abs(float(ev.start.sigma_param[0]) - s_target) <= 0.05]
    if not near:
        raise ConfigError(
            f"no return event near t = {t_target}, sigma = {s_target}")
    ev = min(near, key=lambda e: e.transversality_defect)
    return chart, sigma, ev, events


def _run_tail_targeting(scn: Scenario, ctx: _Ctx):
    cfg = dict(scn.operation)
    cfg.pop("op")
    chart, sigma, ev, _ = _scan_event(scn, ctx, cfg)
    _no_extras(cfg, "operation")

    scaffold = conformal.target_loop_tail(sigma, chart, ev, tol=ctx.tol)

    # precondition gate: a closed orbit must be refused
    tchart = make_model("flat_torus").chart
    tline = conormal.coordinate_line(tchart, 1, 0.0)
    closed = [e for e in conormal.find_returns(tline, tchart, T=7.0, grid=8,
                                               tol=ctx.tol) if e.is_closed]
    try:
        conformal.target_loop_tail(tline, tchart, closed[0], tol=ctx.tol)
        refused = 0.0
    except PerturbationError:
        refused = 1.0

    path = ctx.path("tail_scaffold.json")
    if path is not None:
        payload = {
            "t_start": scaffold.t_start, "length": scaffold.length,
            "tube": scaffold.tube, "margin": scaffold.margin,
            "flat_region": scaffold.flat_region,
            "diagnostics": scaffold.diagnostics,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True, default=float)
            fh.write("\n")

    checks = [
        _check("margin", scaffold.margin, low=ctx.bound("margin_min", 0.05)),
        _check("tube", scaffold.tube, low=ctx.bound("tube_min", 1e-3)),
        _check("closed_orbit_refused", refused, low=1.0),
    ]
    return checks, {"tail_fraction": scaffold.length / ev.t_return}


def _run_second_pass(scn: Scenario, ctx: _Ctx):
    cfg = dict(scn.operation)
    cfg.pop("op")
    t0 = float(cfg.pop("t0", 1.2))
    width = float(cfg.pop("width", 0.2))
    _no_extras(cfg, "operation")

    fq, sq = conformal.second_pass_cancellation("half_turn_quotient",
                                                t0=t0, width=width)
    fs, ss = conformal.second_pass_cancellation("round_sphere",
                                                t0=t0, width=width)
    path = ctx.path("cancellation.json")
    if path is not None:
        payload = {"quotient_first": fq, "quotient_second": sq,
                   "sphere_first": fs, "sphere_second": ss}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")

    checks = [
        _check("quotient_ratio", sq / fq,
               high=ctx.bound("cancel_ratio_max", 1e-3)),
        _check("sphere_ratio", ss / fs, low=ctx.bound("control_ratio_min", 0.5)),
        _check("first_displacement", fq, low=ctx.bound("first_min", 0.1)),
    ]
    return checks, {"t0": t0, "width": width}


def _branch_times(events, expected, tol_t):
    """Best |t - expected| per expected time, over closed-chord branches."""
    errs = []
    matched = []
    for t_exp in expected:
        cands = [ev for ev in events if abs(ev.t_return - t_exp) <= 0.25]
        if not cands:
            errs.append(np.inf)
            matched.append(None)
            continue
        best = min(cands, key=lambda ev: abs(ev.t_return - t_exp))
        errs.append(abs(best.t_return - t_exp))
        matched.append(best)
    return errs, matched


def _run_return_scan(scn: Scenario, ctx: _Ctx):
    cfg = dict(scn.operation)
    cfg.pop("op")
    cases = cfg.pop("cases", None)
    _no_extras(cfg, "operation")
    if not cases:
        raise ConfigError("return_scan requires [[operation.cases]]")

    checks = []
    meta = {}
    for case in cases:
        case = dict(case)
        label = str(case.pop("label"))
        model = dict(case.pop("model"))
        sigma_cfg = dict(case.pop("sigma"))
        expected = [float(t) for t in case.pop("expected_times")]
        horizon = float(case.pop("horizon"))
        grid = int(case.pop("grid", 64))
        want_closed = case.pop("closed_at", [])
        _no_extras(case, f"case {label!r}")

        chart = make_model(model.pop("name"), **model).chart
        sigma = conormal.sigma_from_config(chart, sigma_cfg)
        events = conormal.find_returns(sigma, chart, T=horizon, grid=grid,
                                       with_defects=True, tol=ctx.tol)
        errs, matched = _branch_times(events, expected, 0.25)
        for t_exp, err in zip(expected, errs):
            checks.append(_check(f"{label}_t{t_exp:g}_error", err,
                                 high=ctx.bound("time_err_max", 1e-8)))
        defect = max((ev.transversality_defect for ev in matched
                      if ev is not None), default=np.inf)
        checks.append(_check(f"{label}_defect_max", defect,
                             high=ctx.bound("defect_max", 1e-6)))
        for t_exp in want_closed:
            ev = matched[expected.index(float(t_exp))]
            closed = 1.0 if (ev is not None and ev.is_closed) else 0.0
            checks.append(_check(f"{label}_closed_at_t{t_exp:g}", closed,
                                 low=1.0))
        path = ctx.path(f"returns_{label}.csv")
        if path is not None:
            conormal.return_table_csv(events, path)
        meta[label] = {"n_events": len(events)}
    return checks, meta


def _run_closed_separation(scn: Scenario, ctx: _Ctx):
    cfg = dict(scn.operation)
    cfg.pop("op")
    horizon = float(cfg.pop("horizon", 7.0))
    t_closed = float(cfg.pop("t_closed", 2.0 * np.pi))
    sigma_target = cfg.pop("sigma_target", None)
    base_scale = float(cfg.pop("base_scale", 0.1))
    _no_extras(cfg, "operation")

    chart = _model_chart(scn)
    if scn.sigma_cfg is None:
        raise ConfigError(f"scenario {scn.name!r} requires a [sigma] table")
    sigma = conormal.sigma_from_config(chart, scn.sigma_cfg)
    events = conormal.find_returns(sigma, chart, T=horizon, grid=48,
                                   tol=ctx.tol)
    closed = [ev for ev in events
              if ev.is_closed and abs(ev.t_return - t_closed) < 0.25]
    if not closed:
        raise ConfigError(f"no closed branch near t = {t_closed}")
    if sigma_target is not None:
        closed.sort(key=lambda ev: abs(float(ev.start.sigma_param)
                                       - float(sigma_target)))
    result = diffeo.separate_closed_geodesic(
        sigma, chart, closed[0], base_scale=base_scale, seed=ctx.seed)

    path = ctx.path("separation.json")
    if path is not None:
        result.write_json(path)

    norm = result.params.norm if result.params is not None else np.inf
    checks = [
        _check("separated", 1.0 if result.success else 0.0, low=1.0),
        _check("residual_at_old_branch", result.score,
               low=ctx.bound("score_min", 1e-4)),
        _check("parameter_norm", norm, high=ctx.bound("norm_max", 0.05)),
    ]
    return checks, {"n_tried": result.n_tried,
                    "score_before": result.score_before}


def _run_loop_break(scn: Scenario, ctx: _Ctx):
    cfg = dict(scn.operation)
    cfg.pop("op")
    t_window = float(cfg.pop("t_window", 0.5))
    chart, sigma, ev, _ = _scan_event(scn, ctx, cfg)
    _no_extras(cfg, "operation")

    result = conformal.break_loop(sigma, chart, ev, t_window=t_window,
                                  tol=ctx.tol)
    path = ctx.path("break_report.json")
    if path is not None:
        result.write_json(path)

    checks = [
        _check("broken", 1.0 if result.success else 0.0, low=1.0),
        _check("defect_before", result.defect_before,
               high=ctx.bound("defect_before_max", 1e-4)),
        _check("defect_after", result.defect_after,
               low=ctx.bound("defect_after_min", 1e-3)),
        _check("s_norm", float(np.linalg.norm(result.s)),
               high=ctx.bound("s_norm_max", 0.1)),
        _check("survivors", len(result.events_after), low=1.0),
    ]
    return checks, {"tail_length": result.scaffold.length,
                    "n_tried": len(result.tried)}


def _torus_line_brute_count(grid):
    """Independent mode count for the unit-spaced dual line, weight one."""
    modes = np.abs(np.arange(-601, 602))
    return np.array([float(np.sum(modes <= lam)) for lam in grid])


def _run_kuznecov_surface(scn: Scenario, ctx: _Ctx):
    cfg = dict(scn.operation)
    cfg.pop("op")
    surface = str(_need(cfg, "surface"))
    cfg.pop("surface")
    lam_max = float(cfg.pop("lam_max", 500.0))
    grid_n = int(cfg.pop("grid_n", 16384))
    smooth = float(cfg.pop("smooth", 0.03))
    horizon = float(cfg.pop("horizon", 20.0))
    expected_peaks = [float(t) for t in cfg.pop("expected_peaks", [])]
    _no_extras(cfg, "operation")

    checks = []
    meta = {}
    if surface == "torus":
        series = kuznecov.torus_series(lambda_max=lam_max)
        brute_grid = np.concatenate([np.arange(0.5, lam_max, 1.0),
                                     np.arange(1.0, lam_max + 0.5, 1.0)])
        brute = _torus_line_brute_count(brute_grid)
        exact_gap = float(np.max(np.abs(series.counting(brute_grid) - brute)))
        checks.append(_check("lattice_count_gap", exact_gap, high=0.0))
        exact_fit = kuznecov.fit_leading(series, grid_n=8192)
        # remainder against the exact leading law 2*lam; the fitted law's
        # small coefficient error would swamp the order-one bound otherwise.
        # The remainder is piecewise linear between jumps, so probing each
        # jump from both sides bounds it over the whole interval.
        rem_grid = np.concatenate([brute_grid, brute_grid - 1e-6])
        rem = series.counting(rem_grid) - 2.0 * rem_grid
        checks.append(_check("residual_low", float(np.min(rem)),
                             low=ctx.bound("residual_low", -1.01)))
        checks.append(_check("residual_high", float(np.max(rem)),
                             high=ctx.bound("residual_high", 1.01)))
    elif surface == "sphere":
        l_max = int(lam_max)
        u0 = 0.0
        if scn.sigma_cfg is not None:
            u0 = float(scn.sigma_cfg.get("level", 0.0))
        series = kuznecov.sphere_series({"kind": "latitude", "u0": u0},
                                        l_max=l_max)
        if abs(u0) < 1e-12:
            # parity at the equator: odd-degree zonal values vanish at
            # zero argument, so those circle integrals carry no weight
            pl = kuznecov._normalized_legendre(0.0, l_max)
            odd_weight = float(np.max(2.0 * np.pi * pl[1::2] ** 2))
            checks.append(_check("odd_degree_weight", odd_weight,
                                 high=ctx.bound("odd_weight_max", 1e-12)))
        exact_fit = kuznecov.fit_leading(series, grid_n=8192)
        b1 = kuznecov.individual_bound_check(series, lam_cap=series.lam_max / 2)
        b2 = kuznecov.individual_bound_check(series)
        checks.append(_check("bound_ratio_stability",
                             b2["ratio"] / b1["ratio"],
                             low=ctx.bound("bound_ratio_low", 0.5),
                             high=ctx.bound("bound_ratio_high", 2.0)))
        meta["individual_bound"] = b2["ratio"]
    else:
        raise ConfigError(f"unknown surface {surface!r}")

    checks.append(_check("exponent", exact_fit.exponent,
                         low=ctx.bound("exponent_low", 0.95),
                         high=ctx.bound("exponent_high", 1.05)))
    c_lo, c_hi = ctx.bound("coefficient_low"), ctx.bound("coefficient_high")
    if c_lo is not None or c_hi is not None:
        checks.append(_check("coefficient", exact_fit.coefficient,
                             low=c_lo, high=c_hi))

    fit = kuznecov.fit_leading(series, grid_n=grid_n, smooth=smooth)
    spec = kuznecov.oscillation_spectrum(fit.grid, fit.residual,
                                         horizon=horizon, smooth=smooth)
    times = spec.peak_times()
    for t_exp in expected_peaks:
        err = min((abs(t - t_exp) for t in times), default=np.inf)
        checks.append(_check(f"peak_t{t_exp:g}_error", err,
                             high=spec.resolution))
    checks.append(_check("n_band_peaks", len(times), low=len(expected_peaks),
                         high=ctx.bound("peaks_max", len(expected_peaks))))

    for name, writer, obj in (
            ("series.csv", kuznecov.write_series_csv, series),
            ("residual.csv", kuznecov.write_residual_csv, exact_fit),
            ("peaks.json", kuznecov.write_peaks_json, spec)):
        path = ctx.path(name)
        if path is not None:
            writer(obj, path)
    meta["n_modes"] = int(series.lam.size)
    return checks, meta


def _spectrum_return_match(series, chart, sigma, horizon, grid_n, smooth,
                           scan_T, scan_grid, tol):
    fit = kuznecov.fit_leading(series, grid_n=grid_n, smooth=smooth)
    spec = kuznecov.oscillation_spectrum(fit.grid, fit.residual,
                                         horizon=horizon, smooth=smooth)
    events = conormal.find_returns(sigma, chart, T=scan_T, grid=scan_grid,
                                   tol=tol)
    r_times = sorted({round(ev.t_return, 6) for ev in events
                      if ev.t_return <= horizon})
    p_times = spec.peak_times()
    unmatched_peaks = [t for t in p_times
                       if min((abs(t - r) for r in r_times), default=np.inf)
                       > spec.resolution]
    unmatched_returns = [r for r in r_times
                         if min((abs(r - t) for t in p_times), default=np.inf)
                         > spec.resolution]
    return spec, r_times, unmatched_peaks, unmatched_returns


def _run_frequency_match(scn: Scenario, ctx: _Ctx):
    cfg = dict(scn.operation)
    cfg.pop("op")
    cases = cfg.pop("cases", None)
    _no_extras(cfg, "operation")
    if not cases:
        raise ConfigError("frequency_match requires [[operation.cases]]")

    checks = []
    meta = {}
    for case in cases:
        case = dict(case)
        label = str(case.pop("label"))
        surface = str(case.pop("surface"))
        horizon = float(case.pop("horizon"))
        scan_T = float(case.pop("scan_horizon", horizon))
        lam_max = float(case.pop("lam_max"))
        smooth = float(case.pop("smooth", 0.03))
        grid_n = int(case.pop("grid_n", 16384))
        scan_grid = int(case.pop("scan_grid", 64))
        sigma_cfg = dict(case.pop("sigma"))
        _no_extras(case, f"case {label!r}")

        if surface == "torus":
            chart = make_model("flat_torus").chart
            series = kuznecov.torus_series(lambda_max=lam_max)
        elif surface == "sphere":
            chart = make_model("round_sphere").chart
            series = kuznecov.sphere_series(
                {"kind": "latitude", "u0": float(sigma_cfg["level"])},
                l_max=int(lam_max))
        else:
            raise ConfigError(f"unknown surface {surface!r}")
        sigma = conormal.sigma_from_config(chart, sigma_cfg)
        spec, r_times, up, ur = _spectrum_return_match(
            series, chart, sigma, horizon, grid_n, smooth, scan_T,
            scan_grid, ctx.tol)
        checks.append(_check(f"{label}_unmatched_peaks", len(up), high=0.0))
        checks.append(_check(f"{label}_unmatched_returns", len(ur), high=0.0))
        checks.append(_check(f"{label}_n_peaks", len(spec.peaks), low=1.0))
        meta[label] = {"peak_times": spec.peak_times(),
                       "return_times": r_times,
                       "resolution": spec.resolution}
        path = ctx.path(f"peaks_{label}.json")
        if path is not None:
            kuznecov.write_peaks_json(spec, path)
    return checks, meta


_RUNNERS = {
    "pullback_jacobian_fd": _run_pullback_jacobian,
    "response_closed_form": _run_response_closed_form,
    "remainder_order": _run_remainder_order,
    "endpoint_surjectivity": _run_endpoint_surjectivity,
    "tail_targeting": _run_tail_targeting,
    "second_pass_cancellation": _run_second_pass,
    "return_scan": _run_return_scan,
    "closed_separation": _run_closed_separation,
    "loop_break": _run_loop_break,
    "kuznecov_surface": _run_kuznecov_surface,
    "frequency_match": _run_frequency_match,
}


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------

def run(scenario, out_dir=None, seed: Optional[int] = None,
        tol: float = DEFAULT_TOL) -> ScenarioReport:
    """Execute one scenario and return its report.

    ``scenario`` may be a Scenario, a builtin name, a config path, or a
    config dict.  Artifacts (CSV/JSON evidence) are written only when
    ``out_dir`` is given; the report JSON is stored there as well.
    """
    if not isinstance(scenario, Scenario):
        scenario = load_scenario(scenario)
    ctx = _Ctx(
        out_dir=None if out_dir is None else Path(out_dir),
        seed=scenario.seed if seed is None else int(seed),
        tol=tol, thresholds=scenario.thresholds)
    checks, meta = _RUNNERS[scenario.op](scenario, ctx)
    report = ScenarioReport(
        name=scenario.name, claim=scenario.claim,
        passed=all(c.passed for c in checks),
        checks=checks, artifacts=list(ctx.artifacts),
        meta={"seed": ctx.seed, "operation": scenario.op, **meta})
    if ctx.out_dir is not None:
        report.write_json(ctx.out_dir / "report.json")
        report.artifacts.append("report.json")
    return report


def _run_builtin(args):
    name, out_root, seed, tol = args
    out = None if out_root is None else Path(out_root) / name
    return run(name, out_dir=out, seed=seed, tol=tol)


def verify_all(out_dir=None, names=None, workers: int = 1,
               tol: float = DEFAULT_TOL):
    """Run every builtin scenario (or ``names``) and return the reports.

    Each scenario writes into its own subdirectory of ``out_dir``; with
    ``workers`` > 1 scenarios run in separate processes.
    """
    names = list_builtin() if names is None else list(names)
    for name in names:
        if name not in _BUILTIN_ORDER:
            raise ConfigError(f"unknown builtin scenario {name!r}")
    root = None if out_dir is None else str(out_dir)
    jobs = [(name, root, None, tol) for name in names]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(_run_builtin, jobs))
    else:
        reports = [_run_builtin(job) for job in jobs]
    return reports
