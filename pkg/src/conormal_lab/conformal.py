"""Conformal metric perturbations localized along a geodesic segment.

The perturbation multiplies the cometric by (1 + f_s) where f_s is a small
family of bump profiles supported in a thin tube around a unit-speed
geodesic segment.  The profile moments are tuned so the endpoint of the
segment responds to the parameters s in independently controlled phase
directions, which is what lets a degenerate returning family be broken
into transversal isolated returns.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import solve_ivp

from .charts import MetricChart, scale_chart, affine_rescale_chart
from .errors import PerturbationError
from .flow import DEFAULT_TOL, integrate_dense
from .util import gauss_legendre_quad, periodic_delta, poly_bump, poly_bump_d1

__all__ = [
    "AxisCombo",
    "BumpProfile",
    "BumpTriple",
    "ConformalParams",
    "LinearResponse",
    "EndpointReport",
    "TailScaffold",
    "BreakLoopResult",
    "build_bumps",
    "f_s_eval",
    "f_s_grad",
    "perturbed_symbol",
    "linear_response",
    "linear_response_fd",
    "closed_form_response",
    "epsilon_error_curve",
    "endpoint_jacobian",
    "endpoint_pattern",
    "target_loop_tail",
    "break_loop",
    "second_pass_cancellation",
]

# axis profiles live strictly inside (ALPHA, 1 - ALPHA) so the perturbation
# clears both endpoints of the unit segment
ALPHA = 0.1
AXIS_CENTERS = (0.35, 0.65)
AXIS_WIDTH = 0.2
QUAD_ORDER = 64


# ---------------------------------------------------------------------------
# profile construction
# ---------------------------------------------------------------------------

class AxisCombo:
    """Linear combination of translated polynomial bumps on the unit interval.

    Each bump is polynomial on its support, so Gauss-Legendre rules applied
    piecewise between support edges integrate every moment exactly.
    """

    def __init__(self, coeffs, centers=AXIS_CENTERS, width=AXIS_WIDTH):
        self.coeffs = np.asarray(coeffs, float)
        self.centers = np.asarray(centers, float)
        self.width = float(width)
        if self.coeffs.shape != self.centers.shape:
            raise ValueError("one coefficient per bump center")

    def value(self, t):
        t = np.asarray(t, float)
        out = np.zeros_like(t)
        for c, ctr in zip(self.coeffs, self.centers):
            out = out + c * poly_bump((t - ctr) / self.width)
        return out

    def d1(self, t):
        t = np.asarray(t, float)
        out = np.zeros_like(t)
        for c, ctr in zip(self.coeffs, self.centers):
            out = out + (c / self.width) * poly_bump_d1((t - ctr) / self.width)
        return out

    def integral(self, lo: float, hi: float, weight=None, order: int = 16) -> float:
        """Integrate value (times an optional weight) piecewise exactly."""
        if hi <= lo:
            return 0.0
        cuts = {lo, hi}
        for ctr in self.centers:
            for edge in (ctr - self.width, ctr + self.width):
                if lo < edge < hi:
                    cuts.add(float(edge))
        pieces = sorted(cuts)
        f = self.value if weight is None else (
            lambda t: self.value(t) * weight(t))
        return float(sum(
            gauss_legendre_quad(f, a, b, order=order)
            for a, b in zip(pieces[:-1], pieces[1:])))

    @property
    def support(self):
        lo = float(np.min(self.centers) - self.width)
        hi = float(np.max(self.centers) + self.width)
        return lo, hi


@dataclass
class BumpProfile:
    """Product profile a(x1) * prod_i chi(x_i / w) with an even transverse factor.

    The transverse factor equals 1 with vanishing derivative on the axis, so
    every profile has a transverse critical point there.
    """

    axis: AxisCombo
    trans_width: float

    def value(self, x):
        x = np.asarray(x, float)
        v = self.axis.value(x[0])
        for xi in x[1:]:
            v = v * poly_bump(xi / self.trans_width)
        return float(v)

    def grad(self, x):
        x = np.asarray(x, float)
        n = x.shape[0]
        trans = [poly_bump(xi / self.trans_width) for xi in x[1:]]
        dtrans = [poly_bump_d1(xi / self.trans_width) / self.trans_width
                  for xi in x[1:]]
        g = np.zeros(n)
        prod_all = float(np.prod(trans)) if trans else 1.0
        g[0] = self.axis.d1(x[0]) * prod_all
        a = self.axis.value(x[0])
        for k in range(1, n):
            others = prod_all / trans[k - 1] if trans[k - 1] != 0.0 else 0.0
            if trans[k - 1] == 0.0:
                others = float(np.prod(trans[:k - 1] + trans[k:]))
            g[k] = a * dtrans[k - 1] * others
        return g

    @property
    def support(self):
        lo, hi = self.axis.support
        return (lo, hi), self.trans_width


@dataclass
class BumpTriple:
    """The three tuned axis profiles behind a conformal perturbation.

    h1 integrates to move the endpoint along the segment, h2 tips the
    endpoint covector, h3 shifts the endpoint position sideways; the
    mixed moments of h2 and h3 are tuned to zero so the two effects are
    independent at first order.
    """

    h1: BumpProfile
    h2: BumpProfile
    h3: BumpProfile
    moment_det: float
    quad_order: int
    quad_refinement_delta: float
    meta: dict = field(default_factory=dict)


def _axis_moments(combo: AxisCombo, order: int):
    m0 = combo.integral(0.0, 1.0, order=order)
    m1 = combo.integral(0.0, 1.0, weight=lambda t: 1.0 - t, order=order)
    return m0, m1


def build_bumps(tube: float, quad_order: int = QUAD_ORDER,
                centers=AXIS_CENTERS, width: float = AXIS_WIDTH) -> BumpTriple:
    """Tune the three axis profiles for a tube of the given half-width.

    h1 satisfies (1/2) int h1 = 1.  h2 and h3 satisfy
    -(1/2) int h2 = 1, -(1/2) int (1-t) h2 = 0 and
    -(1/2) int h3 = 0, -(1/2) int (1-t) h3 = 1, solved exactly from the
    2x2 moment matrix of the two base bumps.
    """
    tube = float(tube)
    if tube <= 0:
        raise PerturbationError("tube half-width must be positive")
    centers = tuple(float(c) for c in centers)
    lo = min(centers) - width
    hi = max(centers) + width
    if lo <= ALPHA - 1e-12 or hi >= 1.0 - ALPHA + 1e-12:
        raise PerturbationError(
            f"axis support [{lo:.3f}, {hi:.3f}] must stay inside "
            f"({ALPHA}, {1 - ALPHA})")

    base = [AxisCombo(np.eye(2)[k], centers, width) for k in range(2)]

    def moment_matrix(order):
        M = np.zeros((2, 2))
        for k, b in enumerate(base):
            m0, m1 = _axis_moments(b, order)
            M[0, k] = -0.5 * m0
            M[1, k] = -0.5 * m1
        return M

    M = moment_matrix(quad_order)
    M2 = moment_matrix(2 * quad_order)
    delta = float(np.max(np.abs(M - M2)))
    det = float(np.linalg.det(M))
    if abs(det) < 1e-6:
        raise PerturbationError(f"moment matrix is near singular, det = {det:.3e}")

    c2 = np.linalg.solve(M, np.array([1.0, 0.0]))
    c3 = np.linalg.solve(M, np.array([0.0, 1.0]))
    m0_first, _ = _axis_moments(base[0], quad_order)
    c1 = np.array([1.0 / (0.5 * m0_first), 0.0])

    trans_w = 0.8 * tube
    return BumpTriple(
        h1=BumpProfile(AxisCombo(c1, centers, width), trans_w),
        h2=BumpProfile(AxisCombo(c2, centers, width), trans_w),
        h3=BumpProfile(AxisCombo(c3, centers, width), trans_w),
        moment_det=det,
        quad_order=quad_order,
        quad_refinement_delta=delta,
        meta={"tube": tube, "centers": centers, "width": float(width)},
    )


# ---------------------------------------------------------------------------
# the parameterized conformal factor
# ---------------------------------------------------------------------------

@dataclass
class ConformalParams:
    """Parameter vector s of length 2n - 1 with its bump triple.

    Component 0 scales h1; components 1 .. n-1 scale x_i h2 and components
    n .. 2n-2 scale x_i h3 for the transverse coordinates i = 2 .. n.
    """

    s: np.ndarray
    epsilon: float
    bumps: BumpTriple
    n: int = 2

    def __post_init__(self):
        self.s = np.asarray(self.s, float)
        if self.s.shape != (2 * self.n - 1,):
            raise PerturbationError(
                f"expected {2 * self.n - 1} parameters for n = {self.n}")

    def with_s(self, s):
        return ConformalParams(np.asarray(s, float), self.epsilon,
                               self.bumps, self.n)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.s))


def f_s_eval(params: ConformalParams, x) -> float:
    """The conformal profile f_s at a point of the scaled segment chart."""
    x = np.asarray(x, float)
    n = params.n
    s = params.s
    v = s[0] * params.bumps.h1.value(x)
    for i in range(2, n + 1):
        xi = x[i - 1]
        v += s[i - 1] * xi * params.bumps.h2.value(x)
        v += s[i - 1 + n - 1] * xi * params.bumps.h3.value(x)
    return float(v)


def f_s_grad(params: ConformalParams, x) -> np.ndarray:
    """Gradient of f_s at a point."""
    x = np.asarray(x, float)
    n = params.n
    s = params.s
    g = s[0] * params.bumps.h1.grad(x)
    for i in range(2, n + 1):
        xi = x[i - 1]
        for prof, coeff in ((params.bumps.h2, s[i - 1]),
                            (params.bumps.h3, s[i - 1 + n - 1])):
            gv = prof.grad(x)
            hv = prof.value(x)
            term = xi * gv
            term[i - 1] += hv
            g = g + coeff * term
    return g


def _conformal_chart(chart: MetricChart, fval: Callable, fgrad: Callable,
                     tag: str, max_step: Optional[float] = None) -> MetricChart:
    """Chart of the symbol (1 + f) p over an existing chart."""

    def ginv_fn(x):
        return (1.0 + fval(x)) * chart.ginv(x)

    def dginv_fn(x):
        G = chart.ginv(x)
        dG = chart.dginv(x)
        g = fgrad(x)
        w = 1.0 + fval(x)
        out = np.empty_like(dG)
        for k in range(chart.n):
            out[k] = g[k] * G + w * dG[k]
        return out

    meta = {k: v for k, v in chart.meta.items()
            if k not in ("_exact_flow", "ginv_batch")}
    meta[tag] = True
    if max_step is not None:
        meta["max_step"] = min(float(max_step),
                               float(chart.meta.get("max_step", 0.25)))
    return MetricChart(
        n=chart.n, ginv_fn=ginv_fn, dginv_fn=dginv_fn,
        periods=chart.periods, domain=chart.domain, flow_hint=None, meta=meta)


def perturbed_symbol(chart: MetricChart, params: ConformalParams,
                     check_grid: int = 25) -> MetricChart:
    """Chart whose symbol is (1 + f_s) times the given chart's symbol.

    The conformal factor is checked for positivity over the profile
    support; a factor at or below zero raises PerturbationError.
    """
    (lo, hi), trans_w = params.bumps.h1.support
    axes = [np.linspace(lo, hi, check_grid)]
    for _ in range(chart.n - 1):
        axes.append(np.linspace(-trans_w, trans_w, check_grid))
    worst = np.inf
    for pt in np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, chart.n):
        worst = min(worst, 1.0 + f_s_eval(params, pt))
    if worst <= 0.05:
        raise PerturbationError(
            f"conformal factor reaches {worst:.3e}; parameters too large")

    width = params.bumps.meta.get("width", AXIS_WIDTH)
    cap = 0.5 * min(width, trans_w)
    return _conformal_chart(
        chart, lambda x: f_s_eval(params, x), lambda x: f_s_grad(params, x),
        tag="conformal_perturbed", max_step=cap)


# ---------------------------------------------------------------------------
# linear response along the axis orbit
# ---------------------------------------------------------------------------

@dataclass
class LinearResponse:
    """First-order response of the axis orbit to one parameter component."""

    t: np.ndarray
    dx_ds: np.ndarray
    dxi_ds: np.ndarray
    component: int
    meta: dict = field(default_factory=dict)


def _axis_orbit_check(chart: MetricChart, tol: float, strict: float = 1e-8):
    """Verify that (t e1, e1) is an orbit of the chart's geodesic flow."""
    n = chart.n
    e1 = np.zeros(n)
    e1[0] = 1.0
    ts = np.linspace(0.0, 1.0, 21)
    G_dev = max(float(np.max(np.abs(chart.ginv(t * e1) - np.eye(n)))) for t in ts)
    traj = integrate_dense(chart, np.zeros(n), e1, 1.0, tol=tol)
    zs = traj.state(ts)
    x_dev = float(np.max(np.abs(zs[:n] - np.outer(e1, ts))))
    xi_dev = float(np.max(np.abs(zs[n:] - e1[:, None])))
    dev = max(G_dev, x_dev, xi_dev)
    if dev > strict:
        raise PerturbationError(
            f"the unit axis is not an orbit of this chart (deviation {dev:.3e})")
    return dev


def _forcing(params: ConformalParams, j: int):
    """On-axis value and gradient of the unit component j of f_s."""
    n = params.n
    if not 0 <= j <= 2 * n - 2:
        raise PerturbationError(f"component must be in 0..{2 * n - 2}")
    if j == 0:
        prof = params.bumps.h1

        def fa(t):
            return prof.axis.value(t)

        def grad(t):
            g = np.zeros(n)
            g[0] = prof.axis.d1(t)
            return g

        label = "h1"
    else:
        if j <= n - 1:
            prof, label = params.bumps.h2, f"h2_x{j + 1}"
            i = j + 1
        else:
            prof, label = params.bumps.h3, f"h3_x{j - n + 2}"
            i = j - n + 2

        def fa(t):
            return 0.0

        def grad(t, i=i, prof=prof):
            g = np.zeros(n)
            g[i - 1] = prof.axis.value(t)
            return g

    return fa, grad, label


def linear_response(chart: MetricChart, params: ConformalParams, j: int,
                    t_grid=None, tol: float = DEFAULT_TOL) -> LinearResponse:
    """Integrate the first-order response of the axis orbit to s_j.

    The chart must carry the unit axis orbit (t e1, e1); the linearized
    system couples the response to the on-axis Hessian of the leading
    symbol coefficient, which carries the square of the segment scale.
    """
    n = params.n
    if chart.n != n:
        raise PerturbationError("chart dimension does not match the parameters")
    if t_grid is None:
        t_grid = np.linspace(0.0, 1.0, 101)
    t_grid = np.asarray(t_grid, float)
    axis_dev = _axis_orbit_check(chart, tol)

    fa, grad, label = _forcing(params, j)
    e1 = np.zeros(n)
    e1[0] = 1.0

    def hess(t):
        d2 = chart.d2ginv(t * e1)
        return d2[:, :, 0, 0]

    def rhs(t, y):
        dx, dxi = y[:n], y[n:]
        ddx = fa(t) * e1 + dxi
        ddxi = -0.5 * hess(t) @ dx - 0.5 * grad(t)
        return np.concatenate([ddx, ddxi])

    sol = solve_ivp(rhs, (0.0, 1.0), np.zeros(2 * n), method="RK45",
                    rtol=min(tol, 1e-12), atol=min(tol, 1e-12),
                    dense_output=True, max_step=0.05)
    if sol.status != 0:
        raise PerturbationError(f"response integration failed: {sol.message}")
    ys = sol.sol(t_grid)
    return LinearResponse(
        t=t_grid, dx_ds=ys[:n], dxi_ds=ys[n:], component=j,
        meta={"label": label, "axis_deviation": axis_dev})


def linear_response_fd(chart: MetricChart, params: ConformalParams, j: int,
                       t_grid=None, step: float = 1e-4,
                       tol: float = DEFAULT_TOL) -> LinearResponse:
    """Central-difference response from the full nonlinear perturbed flow.

    Uses the fourth-order five-point stencil at +-step and +-2 step so the
    comparison against the linearized system is not limited by the leading
    truncation term.
    """
    n = params.n
    if t_grid is None:
        t_grid = np.linspace(0.0, 1.0, 101)
    t_grid = np.asarray(t_grid, float)
    e1 = np.zeros(n)
    e1[0] = 1.0
    flow_tol = min(tol, 1e-12)

    def states_at(mult):
        s = np.zeros(2 * n - 1)
        s[j] = mult * step
        pchart = perturbed_symbol(chart, params.with_s(s))
        traj = integrate_dense(pchart, np.zeros(n), e1,
                               float(t_grid[-1]) + 1e-9,
                               tol=flow_tol, force_numeric=True)
        return traj.state(t_grid)

    diff = (8.0 * (states_at(1.0) - states_at(-1.0))
            - (states_at(2.0) - states_at(-2.0))) / (12.0 * step)
    return LinearResponse(t=t_grid, dx_ds=diff[:n], dxi_ds=diff[n:],
                          component=j, meta={"method": "fd", "step": step})


def closed_form_response(params: ConformalParams, j: int,
                         t_grid=None) -> LinearResponse:
    """Flat-limit response by direct integration of the axis profiles.

    For the axis component the displacement is half the running integral of
    the profile along e1 and the covector response is minus half the
    profile itself.  For transverse components the covector picks up minus
    half the running integral of the gradient and the displacement its
    once-iterated integral.
    """
    n = params.n
    if t_grid is None:
        t_grid = np.linspace(0.0, 1.0, 101)
    t_grid = np.asarray(t_grid, float)
    fa, grad, label = _forcing(params, j)
    dx = np.zeros((n, t_grid.size))
    dxi = np.zeros((n, t_grid.size))
    if j == 0:
        a = params.bumps.h1.axis
        for m, t in enumerate(t_grid):
            dx[0, m] = 0.5 * a.integral(0.0, t)
            dxi[0, m] = -0.5 * float(a.value(t))
    else:
        i = j + 1 if j <= n - 1 else j - n + 2
        a = (params.bumps.h2 if j <= n - 1 else params.bumps.h3).axis
        for m, t in enumerate(t_grid):
            dxi[i - 1, m] = -0.5 * a.integral(0.0, t)
            dx[i - 1, m] = -0.5 * a.integral(0.0, t, weight=lambda u, t=t: t - u)
    return LinearResponse(t=t_grid, dx_ds=dx, dxi_ds=dxi, component=j,
                          meta={"label": label, "method": "closed_form"})


def epsilon_error_curve(base_chart: MetricChart, bumps: BumpTriple,
                        eps_list, j: int = 1, n: int = 2,
                        t_grid=None, tol: float = DEFAULT_TOL) -> dict:
    """Deviation of the response from its flat closed form across scales.

    Runs the linearized response on the chart zoomed to each scale in
    eps_list, compares with the flat-limit closed form, and fits the
    log-log slope of max deviation against scale.
    """
    eps_list = [float(e) for e in eps_list]
    if t_grid is None:
        t_grid = np.linspace(0.0, 1.0, 101)
    params = ConformalParams(np.zeros(2 * n - 1), 0.0, bumps, n)
    ref = closed_form_response(params, j, t_grid)
    devs, devs_x, devs_xi = [], [], []
    for eps in eps_list:
        chart_eps = scale_chart(base_chart, eps)
        resp = linear_response(chart_eps, params.with_s(params.s), j, t_grid,
                               tol=tol)
        dx = float(np.max(np.abs(resp.dx_ds - ref.dx_ds)))
        dxi = float(np.max(np.abs(resp.dxi_ds - ref.dxi_ds)))
        devs_x.append(dx)
        devs_xi.append(dxi)
        devs.append(max(dx, dxi))

    def _fit(vals):
        logs = np.log(np.asarray(eps_list))
        v = np.log(np.maximum(np.asarray(vals), 1e-300))
        return float(np.polyfit(logs, v, 1)[0])

    return {"eps": eps_list, "dev": devs, "slope": _fit(devs),
            "dev_x": devs_x, "dev_xi": devs_xi,
            "slope_x": _fit(devs_x), "slope_xi": _fit(devs_xi),
            "component": j}


def epsilon_curve_csv(curve: dict, path) -> None:
    """Write an epsilon vs deviation curve as CSV."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epsilon,deviation\n")
        for e, d in zip(curve["eps"], curve["dev"]):
            fh.write(f"{e!r},{d!r}\n")
        fh.write(f"# slope,{curve['slope']!r}\n")


# ---------------------------------------------------------------------------
# endpoint jacobian
# ---------------------------------------------------------------------------

def endpoint_pattern(n: int) -> np.ndarray:
    """Limiting s-block of the endpoint jacobian: x shifts then xi tips."""
    P = np.zeros((2 * n, 2 * n - 1))
    P[:n, :n] = np.eye(n)
    P[n + 1:, n:] = np.eye(n - 1)
    return P


@dataclass
class EndpointReport:
    """Endpoint jacobian of the segment under (xi_1, s) at t = 1."""

    matrix: np.ndarray
    sigma_min: float
    s_block_deviation: float
    column_labels: list
    epsilon: float
    meta: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "matrix": [[float(v) for v in row] for row in self.matrix],
            "sigma_min": self.sigma_min,
            "s_block_deviation": self.s_block_deviation,
            "column_labels": list(self.column_labels),
            "epsilon": self.epsilon,
        }

    def write_json(self, path):
        import json
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def endpoint_jacobian(chart: MetricChart, params: ConformalParams,
                      tol: float = DEFAULT_TOL) -> EndpointReport:
    """Derivative of the segment endpoint under (xi_1, s).

    The first column is the exact response (e1, e1) to scaling the initial
    covector, which follows from symbol homogeneity.  The s-columns come
    from the linearized response at t = 1 and are presented with position
    shifts before covector tips, so the flat limit is the identity-block
    pattern of :func:`endpoint_pattern`.
    """
    n = params.n
    m = 2 * n - 1
    cols = np.zeros((2 * n, m + 1))
    labels = ["xi1"]
    cols[:n, 0] = np.eye(n)[0]
    cols[n:, 0] = np.eye(n)[0]

    # presentation order: h1, then the h3 block, then the h2 block
    order = [0] + list(range(n, 2 * n - 1)) + list(range(1, n))
    t_end = np.array([0.0, 1.0])
    for k, j in enumerate(order, start=1):
        resp = linear_response(chart, params, j, t_end, tol=tol)
        cols[:n, k] = resp.dx_ds[:, -1]
        cols[n:, k] = resp.dxi_ds[:, -1]
        labels.append(resp.meta["label"])

    sig = np.linalg.svd(cols, compute_uv=False)
    dev = float(np.max(np.abs(cols[:, 1:] - endpoint_pattern(n))))
    return EndpointReport(
        matrix=cols, sigma_min=float(sig[-1]), s_block_deviation=dev,
        column_labels=labels, epsilon=float(params.epsilon),
        meta={"singular_values": [float(v) for v in sig]})


# ---------------------------------------------------------------------------
# tail scaffolding over a returning orbit
# ---------------------------------------------------------------------------

class _TubeMap:
    """Tube coordinates around a polynomial fit of the tail curve."""

    def __init__(self, samples, length, tube, periods, degree=5):
        samples = np.asarray(samples, float)
        self.m = samples.shape[0]
        self.v_nodes = np.linspace(0.0, 1.0, self.m)
        deg = min(degree, self.m - 1)
        self.coef = [np.polynomial.polynomial.polyfit(self.v_nodes, samples[:, k], deg)
                     for k in range(samples.shape[1])]
        self.dcoef = [np.polynomial.polynomial.polyder(c) for c in self.coef]
        fit = np.stack([np.polynomial.polynomial.polyval(self.v_nodes, c)
                        for c in self.coef], axis=1)
        self.fit_residual = float(np.max(np.abs(fit - samples)))
        self.length = float(length)
        self.tube = float(tube)
        self.periods = periods
        self.anchor = samples[self.m // 2].copy()
        self.start = samples[0].copy()

    def curve(self, v):
        return np.array([np.polynomial.polynomial.polyval(v, c) for c in self.coef])

    def curve_d1(self, v):
        return np.array([np.polynomial.polynomial.polyval(v, c) for c in self.dcoef])

    def _unwrap(self, x):
        x = np.asarray(x, float)
        return self.anchor + periodic_delta(x, self.anchor, self.periods)

    def to_tube(self, x):
        """Scaled tube coordinates of a chart point, or None when far away."""
        d = self._unwrap(x)
        rel = d - self.anchor
        if np.max(np.abs(rel)) > 0.75 * self.length + 6.0 * self.tube:
            return None
        chord = self.curve(1.0) - self.curve(0.0)
        v = float(np.clip((d - self.start) @ chord / (chord @ chord), -0.4, 1.4))
        for _ in range(12):
            c = self.curve(v)
            cd = self.curve_d1(v)
            num = (d - c) @ cd
            den = cd @ cd
            if den == 0.0:
                return None
            step = num / den
            v = float(np.clip(v + step, -0.4, 1.4))
            if abs(step) < 1e-14:
                break
        c = self.curve(v)
        cd = self.curve_d1(v)
        tnorm = np.linalg.norm(cd)
        if tnorm == 0.0:
            return None
        that = cd / tnorm
        nhat = np.array([-that[1], that[0]])
        y = float((d - c) @ nhat)
        if abs(y) > 4.0 * self.tube:
            return None
        return np.array([v, y / self.length])


@dataclass
class TailScaffold:
    """Scaled chart and transport data for perturbing an orbit tail."""

    chart: MetricChart
    params0: ConformalParams
    tube_map: _TubeMap
    model_chart: MetricChart
    t_start: float
    length: float
    tube: float
    margin: float
    flat_region: bool
    diagnostics: dict = field(default_factory=dict)

    def f_model(self, s) -> Callable:
        """The conformal profile transported to model coordinates."""
        params = self.params0.with_s(s)

        def fval(x):
            X = self.tube_map.to_tube(x)
            if X is None:
                return 0.0
            return f_s_eval(params, X)

        return fval

    def perturbed_model_chart(self, s) -> MetricChart:
        """Model chart with symbol (1 + f_s) p, f_s living over the tail."""
        params = self.params0.with_s(s)
        (lo, hi), trans_w = params.bumps.h1.support
        worst = np.inf
        for t in np.linspace(lo, hi, 25):
            for y in np.linspace(-trans_w, trans_w, 25):
                worst = min(worst, 1.0 + f_s_eval(params, np.array([t, y])))
        if worst <= 0.05:
            raise PerturbationError(
                f"conformal factor reaches {worst:.3e} over the tail tube")
        fval = self.f_model(s)
        h = 1e-6

        def fgrad(x):
            x = np.asarray(x, float)
            g = np.zeros(x.shape[0])
            for k in range(x.shape[0]):
                e = np.zeros(x.shape[0])
                e[k] = h
                g[k] = (fval(x + e) - fval(x - e)) / (2.0 * h)
            return g

        cap = 0.5 * min(self.tube, self.length * AXIS_WIDTH)
        return _conformal_chart(self.model_chart, fval, fgrad,
                                tag="tail_perturbed", max_step=cap)


def _identity_strip_chart(n: int) -> MetricChart:
    eye = np.eye(n)
    z1 = np.zeros((n,) * 3)
    z2 = np.zeros((n,) * 4)
    return MetricChart(
        n=n, ginv_fn=lambda x: eye, dginv_fn=lambda x: z1,
        d2ginv_fn=lambda x: z2, periods=(None,) * n,
        meta={"model": "tail_strip"})


def target_loop_tail(sigma, chart: MetricChart, event,
                     frac_candidates=(0.2, 0.15, 0.1, 0.07, 0.05),
                     sep_min: float = 0.05, scan_dt: float = 1e-2,
                     closed_tol: float = 1e-6,
                     tol: float = DEFAULT_TOL) -> TailScaffold:
    """Pick the trailing piece of a returning orbit and scale it to a unit chart.

    Requires the orbit of the event to be non-closed and free of sub-time
    closures.  Walks the candidate tail fractions from large to small until
    the tail clears the rest of the orbit by sep_min, then builds the tube
    fit, the scaled tail chart, and a zero-parameter scaffold sized to the
    tail length.  Refusal reports the closest approaches found.
    """
    if event.is_closed:
        raise PerturbationError("orbit is closed; a tail cannot be isolated")
    T = float(event.t_return)
    x0, xi0 = event.start.phase.x, event.start.phase.xi
    traj = integrate_dense(chart, x0, xi0, T, tol=tol)
    if traj.exit_reason != "time":
        raise PerturbationError("orbit left the chart before its return time")

    # sub-time closure would put the whole orbit inside its own tail
    ts = np.arange(0.05 * T, T - 1e-9, scan_dt)
    zs = traj.state(ts)
    n = chart.n
    for k, t in enumerate(ts):
        if t < 0.2:
            continue
        d = chart.phase_distance(chart.wrap(zs[:n, k]), zs[n:, k], x0, xi0)
        if d <= closed_tol:
            raise PerturbationError(
                f"orbit closes up at sub-time {t:.6f}; tail targeting refused")

    t_dense = np.arange(0.0, T + 1e-12, scan_dt)
    if t_dense[-1] < T:
        t_dense = np.append(t_dense, T)
    pts = traj.state(t_dense)[:n].T

    def pair_min(tail_lo):
        """Closest approach between the tail and the earlier orbit piece."""
        gap = 0.08
        tail_idx = t_dense >= tail_lo
        head_idx = t_dense <= tail_lo - gap
        if not head_idx.any():
            return np.inf, None
        tail_pts = pts[tail_idx]
        head_pts = pts[head_idx]
        best = np.inf
        best_pair = None
        for k, p in enumerate(tail_pts):
            delta = periodic_delta(head_pts, p, chart.periods)
            dist = np.sqrt(np.sum(delta * delta, axis=1))
            i = int(np.argmin(dist))
            if dist[i] < best:
                best = float(dist[i])
                best_pair = (float(t_dense[head_idx][i]),
                             float(t_dense[tail_idx][k]))
        return best, best_pair

    tried = []
    chosen = None
    for frac in frac_candidates:
        L = frac * T
        margin, pair = pair_min(T - L)
        tried.append((frac, margin, pair))
        if margin > sep_min:
            chosen = (frac, margin)
            break
    if chosen is None:
        lines = ", ".join(
            f"frac {fr:.2f}: min separation {mg:.4f} near t = {pr}"
            for fr, mg, pr in tried)
        raise PerturbationError(
            "no tail fraction clears the earlier orbit: " + lines)

    frac, margin = chosen
    L = frac * T
    t0 = T - L

    m_fit = 81
    v_nodes = t0 + np.linspace(0.0, 1.0, m_fit) * L
    samples = traj.state(v_nodes)[:n].T
    tmap = _TubeMap(samples, L, min(0.45 * margin, 0.25), chart.periods)

    # the tube must clear the target submanifold around the whole support
    sig_pts = np.array([sigma.point(s) for s in sigma.param_grid(181)])
    probe_v = np.linspace(ALPHA, 1.0 - ALPHA, 25)
    worst_sig = np.inf
    for v in probe_v:
        delta = periodic_delta(sig_pts, chart.wrap(tmap.curve(v)), chart.periods)
        worst_sig = min(worst_sig, float(np.min(np.sqrt(np.sum(delta ** 2, axis=1)))))
    tube = min(0.45 * margin, 0.6 * worst_sig, 0.25)
    if tube < 1e-3:
        raise PerturbationError(
            f"perturbation support cannot clear the submanifold "
            f"(clearance {worst_sig:.4f}, orbit margin {margin:.4f})")
    tmap.tube = tube

    flat = False
    fconf = chart.meta.get("conformal_value")
    if fconf is not None:
        vals = [abs(float(fconf(chart.wrap(tmap.curve(v) + off))))
                for v in np.linspace(-0.05, 1.05, 45)
                for off in (np.zeros(n),
                            tube * np.eye(n)[1] if n > 1 else np.zeros(n),
                            -tube * np.eye(n)[1] if n > 1 else np.zeros(n))]
        flat = max(vals) < 1e-12
    elif chart.meta.get("model") == "flat_torus":
        flat = True

    if flat:
        scaled = _identity_strip_chart(n)
        scaled.meta["scaled"] = L
    else:
        from .fermi import fermi_chart
        xi_t0 = traj.state(np.array([t0]))[n:, 0]
        fchart = fermi_chart(chart, chart.wrap(samples[0]), xi_t0,
                             length=L, tube=tube, tol=tol)
        scaled = affine_rescale_chart(fchart, np.zeros(n), L,
                                      meta_tag="scaled")

    bumps = build_bumps(tube=tube / L)
    params0 = ConformalParams(np.zeros(2 * n - 1), L, bumps, n)
    return TailScaffold(
        chart=scaled, params0=params0, tube_map=tmap, model_chart=chart,
        t_start=t0, length=L, tube=tube, margin=margin, flat_region=flat,
        diagnostics={
            "fractions_tried": [(fr, mg) for fr, mg, _ in tried],
            "fit_residual": tmap.fit_residual,
            "sigma_clearance": worst_sig,
            "sub_time_scan_points": int(ts.size),
        })


# ---------------------------------------------------------------------------
# loop breaking
# ---------------------------------------------------------------------------

@dataclass
class BreakLoopResult:
    """Outcome of a loop-breaking search."""

    success: bool
    s: np.ndarray
    defect_before: float
    defect_after: float
    events_after: list
    endpoint: EndpointReport
    scaffold: TailScaffold
    tried: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "success": bool(self.success),
            "s": [float(v) for v in self.s],
            "s_norm": float(np.linalg.norm(self.s)),
            "defect_before": float(self.defect_before),
            "defect_after": float(self.defect_after),
            "n_events_after": len(self.events_after),
            "sigma_min_endpoint": self.endpoint.sigma_min,
            "tail_length": self.scaffold.length,
            "tried": [{"s": [float(v) for v in s], "defect": float(d)}
                      for s, d in self.tried],
        }

    def write_json(self, path):
        import json
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def break_loop(sigma, chart: MetricChart, event, s_max: float = 0.1,
               defect_min: float = 1e-3, delta_tr: float = 1e-4,
               t_window: float = 0.5, match_radius: float = 0.3,
               grid: int = 32,
               tol: float = DEFAULT_TOL, **tail_opts) -> BreakLoopResult:
    """Break a degenerate return with a tail-supported perturbation.

    Scaffolds the orbit tail, forms the endpoint jacobian, and solves it
    for parameters that push the endpoint in canonical transverse phase
    directions.  Each candidate is verified by re-running the return scan
    with the perturbed symbol.  Survivors of the original return are the
    events within t_window of the old return time that also start within
    match_radius of the old start point with the covector in the same
    hemisphere; unrelated branches (other chords, the reversed run of the
    same chord) are excluded that way.  Success requires every survivor
    to clear defect_min, with confirmation at a doubled start grid.
    """
    from .conormal import find_returns, transversality_defect

    defect_before = transversality_defect(sigma, chart, event, tol=tol)
    if defect_before > delta_tr:
        raise PerturbationError(
            f"the return is already transversal (defect {defect_before:.3e})")

    scaffold = target_loop_tail(sigma, chart, event, tol=tol, **tail_opts)
    report = endpoint_jacobian(scaffold.chart, scaffold.params0, tol=tol)
    n = chart.n
    m = 2 * n - 1
    A = report.matrix

    # canonical endpoint pushes: tip the covector transversally, then
    # shift the endpoint transversally
    targets = []
    for i in range(1, n):
        for sgn in (+1.0, -1.0):
            d = np.zeros(2 * n)
            d[n + i] = sgn
            targets.append(d)
    for i in range(1, n):
        for sgn in (+1.0, -1.0):
            d = np.zeros(2 * n)
            d[i] = sgn
            targets.append(d)

    # presented order back to natural parameter order
    unperm = np.empty(m, int)
    presented = [0] + list(range(n, 2 * n - 1)) + list(range(1, n))
    for pos, j in enumerate(presented):
        unperm[j] = pos

    T_old = float(event.t_return)
    x_old = np.asarray(event.start.phase.x, float)
    xi_old = np.asarray(event.start.phase.xi, float)

    def verify(s_vec, grid_n):
        pchart = scaffold.perturbed_model_chart(s_vec)
        evs = find_returns(sigma.rebind(pchart), pchart, T=T_old + 0.6,
                           grid=grid_n, with_defects=True, tol=tol)
        near = []
        for ev in evs:
            if abs(ev.t_return - T_old) > t_window:
                continue
            dx = periodic_delta(np.atleast_2d(ev.start.phase.x), x_old,
                                chart.periods)[0]
            if float(np.sqrt(np.sum(dx * dx))) > match_radius:
                continue
            if float(np.dot(ev.start.phase.xi, xi_old)) <= 0.0:
                continue
            near.append(ev)
        defect = min((ev.transversality_defect for ev in near), default=0.0)
        return defect, near

    tried = []
    best = (0.0, np.zeros(m), [], None)
    for delta in (0.5 * s_max, s_max):
        for d in targets:
            w = np.linalg.solve(A, d)
            s_pres = w[1:]
            nrm = np.linalg.norm(s_pres)
            if nrm == 0.0:
                continue
            s_nat = (s_pres / nrm * delta)[unperm]
            try:
                defect, near = verify(s_nat, grid)
            except PerturbationError:
                # conformal factor would lose positivity at this magnitude
                tried.append((s_nat, -1.0))
                continue
            tried.append((s_nat, defect))
            if defect > best[0]:
                best = (defect, s_nat, near, None)
            if defect >= defect_min:
                defect2, near2 = verify(s_nat, 2 * grid)
                if defect2 >= defect_min:
                    return BreakLoopResult(
                        success=True, s=s_nat, defect_before=defect_before,
                        defect_after=defect2, events_after=near2,
                        endpoint=report, scaffold=scaffold, tried=tried,
                        meta={"coarse_defect": defect, "grid": grid})
        # next magnitude only if nothing at this one succeeded
    return BreakLoopResult(
        success=False, s=best[1], defect_before=defect_before,
        defect_after=best[0], events_after=best[2], endpoint=report,
        scaffold=scaffold, tried=tried, meta={"grid": grid})


# ---------------------------------------------------------------------------
# second-pass cancellation in the reduced transverse model
# ---------------------------------------------------------------------------

def second_pass_cancellation(model: str = "half_turn_quotient",
                             t0: float = 1.2, width: float = 0.2,
                             amplitude: float = 1.0, tol: float = 1e-11,
                             detail: bool = False):
    """Transverse displacement at the first and second return of a closed orbit.

    Reduced model J'' + J = F along the unit-curvature closed orbit, with
    the forcing bump applied once per orbit period.  On the half-turn
    quotient the orbit period is half the full great-circle period, and
    the two kicks a half period apart cancel exactly at the second return;
    on the full sphere no cancellation occurs.
    """
    if hasattr(model, "name"):
        model = model.name
    periods = {"half_turn_quotient": np.pi, "round_sphere": 2.0 * np.pi}
    if model not in periods:
        raise PerturbationError(
            f"unknown model {model!r}; choose from {sorted(periods)}")
    P = periods[model]
    margin = 0.05
    if not (margin + width < t0 < P - width - margin):
        raise PerturbationError(
            f"forcing support [{t0 - width:.3f}, {t0 + width:.3f}] overlaps the "
            f"section at multiples of {P:.3f}")

    def forcing(t):
        phase = np.mod(t, P)
        return amplitude * float(poly_bump((phase - t0) / width))

    def rhs(t, y):
        return [y[1], forcing(t) - y[0]]

    sol = solve_ivp(rhs, (0.0, 2.0 * P), [0.0, 0.0], method="RK45",
                    rtol=tol, atol=tol, dense_output=True,
                    max_step=width / 3.0)
    if sol.status != 0:
        raise PerturbationError(f"reduced model integration failed: {sol.message}")
    J1, dJ1 = sol.sol(P)
    J2, dJ2 = sol.sol(2.0 * P)
    first = abs(float(J1))
    second = abs(float(J2))
    if detail:
        return {
            "first": first, "second": second,
            "first_velocity": abs(float(dJ1)), "second_velocity": abs(float(dJ2)),
            "period": float(P), "model": model,
            "forcing_scale": amplitude,
        }
    return first, second
