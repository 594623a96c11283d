"""Submanifolds, conormal lifts, and detection of conormal returns.

A Submanifold is an embedded parameterized piece of a chart together with
its tangent frame.  Starts are lifted to unit-energy covectors that
annihilate the tangent space, flowed to a horizon, and crossings of the
submanifold are located by sign changes of a signed distance along dense
output, refined by bracketed root-finding.  Crossings whose arriving
covector fails to annihilate the tangent space are discarded; the rest are
clustered into return branches.  On top of the event list sit a Monte
Carlo estimate of the returning fraction, a transversality certificate
for isolated intersections, and a scan for closed normal geodesics with
the spectrum of the linearized return map.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import brentq

from .charts import MetricChart
from .errors import SearchError
from .flow import DEFAULT_TOL, PhasePoint, integrate_dense, integrate_jet

__all__ = [
    "Submanifold",
    "ConormalPoint",
    "ReturnEvent",
    "coordinate_line",
    "latitude_circle",
    "circle",
    "point_site",
    "fourier_curve",
    "sigma_from_config",
    "conormal_lift",
    "find_returns",
    "return_times",
    "looping_fraction",
    "transversality_defect",
    "closed_normal_scan",
    "return_table_csv",
]

EPS_EVENT = 1e-8
T_MIN = 1e-3
SAMPLE_STEP = 0.05
CLUSTER_DT = 1e-3
CLUSTER_PHASE = 1e-2
CLOSED_TOL = 1e-6


# ---------------------------------------------------------------------------
# submanifolds
# ---------------------------------------------------------------------------

@dataclass
class Submanifold:
    """Embedded parameterized submanifold of a chart.

    ``embed`` maps a parameter vector of length ``dim_sigma`` to chart
    coordinates and ``tangent_frame`` gives the n x k matrix of its
    columns of partial derivatives.  ``param_periods`` marks periodic
    parameter directions (None entries are aperiodic); ``param_box``
    bounds aperiodic ones for grid sampling.
    """

    chart: MetricChart
    dim_sigma: int
    embed: Callable[[np.ndarray], np.ndarray]
    tangent_frame: Callable[[np.ndarray], np.ndarray]
    param_periods: tuple = ()
    param_box: tuple = ()
    name: str = "sigma"
    nearest_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None
    fast_signed_distance: Optional[Callable[[np.ndarray], np.ndarray]] = None
    meta: dict = field(default_factory=dict)

    @property
    def codim(self) -> int:
        return self.chart.n - self.dim_sigma

    def point(self, sigma) -> np.ndarray:
        return np.asarray(self.embed(np.atleast_1d(np.asarray(sigma, float))), float)

    def tangent(self, sigma) -> np.ndarray:
        T = np.asarray(self.tangent_frame(np.atleast_1d(np.asarray(sigma, float))), float)
        return T.reshape(self.chart.n, self.dim_sigma)

    def conormal_frame(self, sigma) -> np.ndarray:
        """n x codim matrix of covectors annihilating the tangent space,
        orthonormal in the dual metric."""
        n, k = self.chart.n, self.dim_sigma
        x = self.point(sigma)
        if k == 0:
            B = np.eye(n)
        elif k == n - 1 and n == 2:
            t = self.tangent(sigma)[:, 0]
            B = np.array([[-t[1]], [t[0]]])
        else:
            T = self.tangent(sigma)
            if np.linalg.matrix_rank(T, tol=1e-10) < k:
                raise SearchError("degenerate tangent frame")
            B = null_space(T.T)
            # deterministic sign convention per column
            for j in range(B.shape[1]):
                i = int(np.argmax(np.abs(B[:, j])))
                if B[i, j] < 0:
                    B[:, j] = -B[:, j]
        G = self.chart.ginv(x)
        M = B.T @ G @ B
        L = np.linalg.cholesky(M)
        return B @ np.linalg.inv(L).T

    def wrap_param(self, sigma) -> np.ndarray:
        s = np.atleast_1d(np.asarray(sigma, float)).copy()
        for i, P in enumerate(self.param_periods):
            if P is not None:
                s[i] = s[i] % P
        return s

    def rebind(self, chart: MetricChart) -> "Submanifold":
        """The same embedded set bound to a compatible chart.

        The embedding is metric independent, so a scan can run against a
        perturbed symbol on the same coordinate domain.  Refuses charts
        with a different dimension or periodicity.
        """
        if chart.n != self.chart.n or tuple(chart.periods) != tuple(self.chart.periods):
            raise ValueError("rebind target lives on a different coordinate domain")
        return replace(self, chart=chart)

    def nearest(self, x) -> np.ndarray:
        """Parameter of the closest submanifold point to x (chart metric
        ignored: Euclidean in chart deltas, which suffices to localize)."""
        x = np.asarray(x, float)
        if self.nearest_fn is not None:
            return self.wrap_param(self.nearest_fn(x))
        return self._nearest_generic(x)

    def _nearest_generic(self, x, n_grid: int = 128, iters: int = 12) -> np.ndarray:
        if self.dim_sigma == 0:
            return np.zeros(0)
        grids = []
        for i in range(self.dim_sigma):
            P = self.param_periods[i] if i < len(self.param_periods) else None
            if P is not None:
                grids.append(np.linspace(0.0, P, n_grid, endpoint=False))
            else:
                lo, hi = self.param_box[i]
                grids.append(np.linspace(lo, hi, n_grid))
        mesh = np.stack([m.ravel() for m in np.meshgrid(*grids, indexing="ij")], axis=-1)
        d2 = np.array([np.sum(self.chart.delta(x, self.point(s)) ** 2) for s in mesh])
        s = mesh[int(np.argmin(d2))].copy()
        # Gauss-Newton on |delta|^2
        for _ in range(iters):
            r = self.chart.delta(x, self.point(s))
            J = -self.tangent(s)
            try:
                step = np.linalg.lstsq(J, -r, rcond=None)[0]
            except np.linalg.LinAlgError:
                break
            s = s + step
            if np.linalg.norm(step) < 1e-13:
                break
        return self.wrap_param(s)

    def signed_distance(self, x) -> float:
        """Signed chart distance to a codimension-1 submanifold."""
        if self.codim != 1 or self.chart.n != 2:
            raise ValueError("signed distance needs a curve in a 2d chart")
        x = np.asarray(x, float)
        s = self.nearest(x)
        d = self.chart.delta(x, self.point(s))
        t = self.tangent(s)[:, 0]
        cross = t[0] * d[1] - t[1] * d[0]
        return math.copysign(float(np.linalg.norm(d)), cross) if cross != 0 else float(np.linalg.norm(d))

    def distance(self, x) -> float:
        x = np.asarray(x, float)
        s = self.nearest(x)
        return float(np.linalg.norm(self.chart.delta(x, self.point(s))))

    def param_grid(self, n_per_dim: int) -> np.ndarray:
        """Deterministic sampling grid over the parameter space."""
        if self.dim_sigma == 0:
            return np.zeros((1, 0))
        axes = []
        for i in range(self.dim_sigma):
            P = self.param_periods[i] if i < len(self.param_periods) else None
            if P is not None:
                axes.append(np.linspace(0.0, P, n_per_dim, endpoint=False))
            else:
                lo, hi = self.param_box[i]
                pad = 0.5 * (hi - lo) / n_per_dim
                axes.append(np.linspace(lo + pad, hi - pad, n_per_dim))
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


# builders -------------------------------------------------------------------

def coordinate_line(chart: MetricChart, axis: int, level: float,
                    name: Optional[str] = None) -> Submanifold:
    """The hypersurface {x_axis = level}; axis is 1-based like x1, x2."""
    n = chart.n
    ax = axis - 1
    if not 0 <= ax < n:
        raise ValueError(f"axis must be in 1..{n}")
    free = [i for i in range(n) if i != ax]
    level = float(level)

    def embed(s):
        x = np.empty(n)
        x[ax] = level
        x[free] = s
        return x

    def tangent(s):
        T = np.zeros((n, n - 1))
        for j, i in enumerate(free):
            T[i, j] = 1.0
        return T

    def nearest(x):
        return np.asarray(x, float)[free]

    P_ax = chart.periods[ax]

    def fast_sd(xs):
        d = np.asarray(xs, float)[ax] - level
        if P_ax is not None:
            d = (d + 0.5 * P_ax) % P_ax - 0.5 * P_ax
        return d

    periods = tuple(chart.periods[i] for i in free)
    box = tuple((None, None) for _ in free)
    return Submanifold(
        chart=chart, dim_sigma=n - 1, embed=embed, tangent_frame=tangent,
        param_periods=periods, param_box=box,
        name=name or f"x{axis}={level:g}", nearest_fn=nearest,
        fast_signed_distance=fast_sd,
        meta={"kind": "coordinate_line", "axis": axis, "level": level},
    )


def latitude_circle(chart: MetricChart, level: float) -> Submanifold:
    """Latitude {u = level} on a sphere-family chart."""
    sm = coordinate_line(chart, 2, level, name=f"latitude u={level:g}")
    sm.meta["kind"] = "latitude"
    return sm


def circle(chart: MetricChart, center, radius: float,
           name: Optional[str] = None) -> Submanifold:
    """Round coordinate circle around a center point in a 2d chart."""
    if chart.n != 2:
        raise ValueError("circle builder needs a 2d chart")
    center = np.asarray(center, float)
    radius = float(radius)

    def embed(s):
        return chart.wrap(center + radius * np.array([np.cos(s[0]), np.sin(s[0])]))

    def tangent(s):
        return radius * np.array([[-np.sin(s[0])], [np.cos(s[0])]])

    def nearest(x):
        d = chart.delta(np.asarray(x, float), center)
        return np.array([np.arctan2(d[1], d[0]) % (2 * np.pi)])

    def fast_sd(xs):
        d = np.stack([np.asarray(xs, float)[0], np.asarray(xs, float)[1]])
        dc = np.empty_like(d)
        for i in range(2):
            v = d[i] - center[i]
            P = chart.periods[i]
            if P is not None:
                v = (v + 0.5 * P) % P - 0.5 * P
            dc[i] = v
        return np.sqrt(dc[0] ** 2 + dc[1] ** 2) - radius

    return Submanifold(
        chart=chart, dim_sigma=1, embed=embed, tangent_frame=tangent,
        param_periods=(2 * np.pi,), param_box=((0.0, 2 * np.pi),),
        name=name or f"circle r={radius:g}", nearest_fn=nearest,
        fast_signed_distance=fast_sd,
        meta={"kind": "circle", "center": tuple(center), "radius": radius},
    )


def point_site(chart: MetricChart, location, name: Optional[str] = None) -> Submanifold:
    """A single point, full-codimension submanifold."""
    loc = chart.wrap(np.asarray(location, float))

    def embed(s):
        return loc.copy()

    def tangent(s):
        return np.zeros((chart.n, 0))

    return Submanifold(
        chart=chart, dim_sigma=0, embed=embed, tangent_frame=tangent,
        param_periods=(), param_box=(), name=name or "point",
        nearest_fn=lambda x: np.zeros(0),
        meta={"kind": "point", "location": tuple(loc)},
    )


def fourier_curve(chart: MetricChart, cos_coeffs, sin_coeffs,
                  name: Optional[str] = None) -> Submanifold:
    """Closed curve with truncated Fourier coordinates in a 2d chart.

    cos_coeffs and sin_coeffs are (m+1) x 2 arrays; the constant row of
    sin_coeffs is ignored.  The curve parameter runs over [0, 2pi).
    """
    A = np.atleast_2d(np.asarray(cos_coeffs, float))
    B = np.atleast_2d(np.asarray(sin_coeffs, float))
    if A.shape != B.shape or A.shape[1] != 2:
        raise ValueError("coefficient arrays must be (m+1) x 2 and equal shape")
    m = A.shape[0] - 1
    ks = np.arange(m + 1)

    def embed(s):
        c = np.cos(ks * s[0])
        sn = np.sin(ks * s[0])
        return chart.wrap(c @ A + sn @ B)

    def tangent(s):
        dc = -ks * np.sin(ks * s[0])
        ds = ks * np.cos(ks * s[0])
        return (dc @ A + ds @ B).reshape(2, 1)

    return Submanifold(
        chart=chart, dim_sigma=1, embed=embed, tangent_frame=tangent,
        param_periods=(2 * np.pi,), param_box=((0.0, 2 * np.pi),),
        name=name or "fourier curve",
        meta={"kind": "fourier_curve", "order": m},
    )


_SIGMA_BUILDERS = {"coordinate_line", "latitude", "circle", "point", "fourier_curve"}


def sigma_from_config(chart: MetricChart, cfg: dict) -> Submanifold:
    """Build a submanifold from a plain config mapping (see builders)."""
    cfg = dict(cfg)
    kind = cfg.pop("kind", None)
    if kind not in _SIGMA_BUILDERS:
        raise ValueError(f"unknown submanifold kind {kind!r}")
    if kind == "coordinate_line":
        return coordinate_line(chart, int(cfg["axis"]), float(cfg["level"]))
    if kind == "latitude":
        return latitude_circle(chart, float(cfg["level"]))
    if kind == "circle":
        return circle(chart, cfg["center"], float(cfg["radius"]))
    if kind == "point":
        return point_site(chart, cfg["location"])
    return fourier_curve(chart, cfg["cos_coeffs"], cfg["sin_coeffs"])


# ---------------------------------------------------------------------------
# conormal lifts and return events
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConormalPoint:
    """A covector over the submanifold annihilating its tangent space."""

    sigma_param: np.ndarray
    normal_coeffs: np.ndarray
    phase: PhasePoint


@dataclass
class ReturnEvent:
    """One conormal-to-conormal return of the flow.

    ``end`` is the conormal re-fit of the terminal phase: position snapped
    to the submanifold at the nearest parameter, covector projected onto
    the conormal frame there.  ``conormal_residual`` is the largest
    pairing of the arriving covector with unit tangent directions,
    relative to the covector norm.
    """

    t_return: float
    start: ConormalPoint
    end: ConormalPoint
    conormal_residual: float
    is_closed: bool
    transversality_defect: Optional[float] = None
    degraded: bool = False
    branch_id: int = -1
    meta: dict = field(default_factory=dict)


def conormal_lift(sigma: Submanifold, chart: Optional[MetricChart],
                  sigma_param, normal_coeffs, unit: bool = True) -> ConormalPoint:
    """Lift a parameter point and fiber coefficients to a conormal covector.

    Coefficients act on the metric-orthonormal conormal frame, so with
    ``unit`` the covector has exact unit energy.
    """
    chart = chart or sigma.chart
    if chart is not sigma.chart:
        raise ValueError("chart does not match the submanifold's chart")
    s = np.atleast_1d(np.asarray(sigma_param, float))
    c = np.atleast_1d(np.asarray(normal_coeffs, float))
    if c.size != sigma.codim:
        raise ValueError(f"need {sigma.codim} normal coefficients")
    nc = np.linalg.norm(c)
    if nc == 0:
        raise ValueError("normal coefficients must be nonzero")
    if unit:
        c = c / nc
    F = sigma.conormal_frame(s)
    xi = F @ c
    x = chart.wrap(sigma.point(s))
    return ConormalPoint(sigma_param=s, normal_coeffs=c, phase=PhasePoint(x, xi))


def _tangential_pairings(sigma: Submanifold, s, xi) -> np.ndarray:
    """Signed pairings with unit tangents, scaled by the covector norm."""
    x = sigma.point(s)
    G = sigma.chart.ginv(x)
    T = sigma.tangent(s)
    norms = np.sqrt(np.einsum("ij,ik,jk->k", np.linalg.inv(G), T, T))
    return (T.T @ xi) / norms / np.sqrt(xi @ G @ xi)


def _conormal_residual(sigma: Submanifold, s, xi) -> float:
    """Largest pairing with unit tangents over the covector's norm."""
    if sigma.dim_sigma == 0:
        return 0.0
    return float(np.max(np.abs(_tangential_pairings(sigma, s, xi))))


def _refit_end(sigma: Submanifold, x, xi) -> ConormalPoint:
    s = sigma.nearest(x)
    F = sigma.conormal_frame(s)
    G = sigma.chart.ginv(sigma.point(s))
    coeffs = F.T @ G @ xi
    return ConormalPoint(sigma_param=s, normal_coeffs=coeffs,
                         phase=PhasePoint(sigma.chart.wrap(sigma.point(s)), F @ coeffs))


def _direction_grid(codim: int, n_dirs: Optional[int]) -> np.ndarray:
    if codim == 1:
        return np.array([[1.0], [-1.0]])
    if codim == 2:
        m = n_dirs or 16
        th = 2 * np.pi * np.arange(m) / m
        return np.stack([np.cos(th), np.sin(th)], axis=-1)
    raise ValueError("conormal direction grids support codimension 1 and 2")


class _UnionFind:
    def __init__(self, n):
        self.p = list(range(n))

    def find(self, i):
        while self.p[i] != i:
            self.p[i] = self.p[self.p[i]]
            i = self.p[i]
        return i

    def union(self, i, j):
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            self.p[ri] = rj


def _sd_along(sigma: Submanifold, xs: np.ndarray) -> np.ndarray:
    """Signed distances for an n x m array of sampled positions."""
    if sigma.fast_signed_distance is not None:
        return np.asarray(sigma.fast_signed_distance(xs), float)
    return np.array([sigma.signed_distance(xs[:, i]) for i in range(xs.shape[1])])


def _detect_crossings(sigma, traj, t_lo, t_hi, step):
    """Bracketed roots of the signed distance along the dense output.

    Yields (t, degraded) pairs; spurious roots at periodic-wrap jumps of
    the signed distance are rejected by a residual check.
    """
    n = sigma.chart.n
    m = max(int(np.ceil((t_hi - t_lo) / step)) + 1, 2)
    ts = np.linspace(t_lo, t_hi, m)
    xs = traj.state(ts)[:n]
    ds = _sd_along(sigma, xs)

    def sd_of_t(t):
        return float(_sd_along(sigma, traj.state(np.array([t]))[:n])[0])

    out = []
    for i in range(m - 1):
        a, b = float(ds[i]), float(ds[i + 1])
        if a == 0.0:
            out.append((float(ts[i]), False))
            continue
        if a * b < 0:
            try:
                t_star = brentq(sd_of_t, float(ts[i]), float(ts[i + 1]),
                                xtol=1e-13, rtol=8.9e-16)
                degraded = False
            except ValueError:
                t_star = 0.5 * (float(ts[i]) + float(ts[i + 1]))
                degraded = True
            if abs(sd_of_t(t_star)) < 1e-7:
                out.append((float(t_star), degraded))
    if float(ds[-1]) == 0.0:
        out.append((float(ts[-1]), False))
    return out


def _detect_point_hits(sigma, traj, t_lo, t_hi, step, hit_tol=1e-6):
    """Local minima of the distance to a full-codimension site."""
    from scipy.optimize import minimize_scalar

    n = sigma.chart.n
    m = max(int(np.ceil((t_hi - t_lo) / step)) + 1, 3)
    ts = np.linspace(t_lo, t_hi, m)
    xs = traj.state(ts)[:n]
    ds = np.array([sigma.distance(xs[:, i]) for i in range(m)])

    def d_of_t(t):
        return sigma.distance(traj.state(np.array([t]))[:n][:, 0])

    out = []
    for i in range(1, m - 1):
        if ds[i] <= ds[i - 1] and ds[i] <= ds[i + 1] and ds[i] < 10 * step:
            res = minimize_scalar(d_of_t, bounds=(float(ts[i - 1]), float(ts[i + 1])),
                                  method="bounded",
                                  options={"xatol": 1e-12})
            if res.fun <= hit_tol:
                out.append((float(res.x), False))
    return out


def find_returns(sigma: Submanifold, chart: Optional[MetricChart], T: float,
                 grid: Optional[int] = None, n_dirs: Optional[int] = None,
                 eps_event: float = EPS_EVENT, t_min: float = T_MIN,
                 sample_step: float = SAMPLE_STEP, closed_tol: float = CLOSED_TOL,
                 cluster_dt: float = CLUSTER_DT, cluster_phase: float = CLUSTER_PHASE,
                 tol: float = DEFAULT_TOL, keep_all: bool = False,
                 with_defects: bool = False, refine_sigma: bool = True,
                 match_window: float = 0.3):
    """Detect conormal returns up to horizon T over a start grid.

    Flows every grid start on the unit conormal bundle, finds submanifold
    crossings along dense output, keeps those arriving conormally
    (residual <= eps_event), and clusters the events into branches: events
    merge when their times agree to cluster_dt and either their end phases
    agree to cluster_phase or they come from neighboring grid starts.
    Returns one representative event per branch (lowest residual), sorted
    by time; ``keep_all`` returns every event instead, branch-tagged.

    With ``refine_sigma`` (curves only), crossings whose signed tangential
    pairing changes sign between neighboring grid starts are refined by a
    root solve in the start parameter, so isolated conormal returns that
    fall between grid nodes are still found.
    """
    chart = chart or sigma.chart
    if chart is not sigma.chart:
        raise ValueError("chart does not match the submanifold's chart")
    if T <= 0:
        raise ValueError("horizon must be positive")
    n_sigma = grid if grid is not None else (32 if sigma.dim_sigma > 0 else 1)
    params = sigma.param_grid(n_sigma)
    dirs = _direction_grid(sigma.codim, n_dirs)

    events = []
    origin = []
    raw_misses = []
    for ip, s in enumerate(params):
        for idir, c in enumerate(dirs):
            start = conormal_lift(sigma, chart, s, c)
            traj = integrate_dense(chart, start.phase.x, start.phase.xi, T, tol=tol)
            t_hi = traj.t_end
            if t_hi <= t_min:
                continue
            if sigma.dim_sigma == 0:
                hits = _detect_point_hits(sigma, traj, t_min, t_hi, sample_step)
            else:
                hits = _detect_crossings(sigma, traj, t_min, t_hi, sample_step)
            for t_star, degraded in hits:
                z = traj.state(np.array([t_star]))[:, 0]
                x_hit, xi_hit = chart.wrap(z[:chart.n]), z[chart.n:]
                s_hit = sigma.nearest(x_hit)
                resid = _conormal_residual(sigma, s_hit, xi_hit)
                if resid > eps_event:
                    if refine_sigma and sigma.dim_sigma == 1:
                        pair = float(_tangential_pairings(sigma, s_hit, xi_hit)[0])
                        raw_misses.append((ip, idir, t_star, pair))
                    continue
                end = _refit_end(sigma, x_hit, xi_hit)
                closed = chart.phase_distance(
                    end.phase.x, end.phase.xi, start.phase.x, start.phase.xi,
                ) <= closed_tol
                ev = ReturnEvent(
                    t_return=t_star, start=start, end=end,
                    conormal_residual=resid, is_closed=bool(closed),
                    degraded=degraded,
                    meta={"truncated": traj.exit_reason != "time"},
                )
                events.append(ev)
                origin.append((ip, idir))

    if raw_misses:
        ref_events, ref_origin = _refine_sigma_roots(
            sigma, chart, params, dirs, raw_misses, t_min, sample_step,
            eps_event, closed_tol, tol, match_window)
        events.extend(ref_events)
        origin.extend(ref_origin)

    if not events:
        return []

    # cluster into branches
    uf = _UnionFind(len(events))
    order = sorted(range(len(events)), key=lambda i: events[i].t_return)
    for a in range(len(order)):
        i = order[a]
        for b in range(a + 1, len(order)):
            j = order[b]
            if events[j].t_return - events[i].t_return > cluster_dt:
                break
            pi, pj = events[i].end.phase, events[j].end.phase
            near_phase = chart.phase_distance(pi.x, pi.xi, pj.x, pj.xi) <= cluster_phase
            (ipi, idi), (ipj, idj) = origin[i], origin[j]
            neighbor = idi == idj and _grid_adjacent(params, ipi, ipj, sigma)
            if near_phase or neighbor:
                uf.union(i, j)

    roots = {}
    for i, ev in enumerate(events):
        roots.setdefault(uf.find(i), []).append(i)
    branches = []
    for bid, (root, members) in enumerate(sorted(roots.items(),
                                                 key=lambda kv: min(events[i].t_return for i in kv[1]))):
        rep = min(members, key=lambda i: (events[i].conormal_residual, events[i].t_return))
        for i in members:
            events[i].branch_id = bid
        events[rep].meta["branch_size"] = len(members)
        events[rep].meta["branch_t_spread"] = (
            max(events[i].t_return for i in members)
            - min(events[i].t_return for i in members))
        branches.append(events[rep])

    if with_defects:
        for ev in branches:
            ev.transversality_defect = transversality_defect(sigma, chart, ev, tol=tol)

    if keep_all:
        return sorted(events, key=lambda e: (e.t_return, e.branch_id))
    return branches


def _refine_sigma_roots(sigma, chart, params, dirs, raw_misses, t_min,
                        sample_step, eps_event, closed_tol, tol, match_window):
    """Solve for start parameters with conormal arrival between grid nodes."""
    m = params.shape[0]
    periodic = bool(sigma.param_periods) and sigma.param_periods[0] is not None
    pairs = [(i, i + 1) for i in range(m - 1)]
    if periodic and m > 2:
        pairs.append((m - 1, 0))
    per = sigma.param_periods[0] if periodic else None

    by_origin = {}
    for ip, idir, t_star, pair in raw_misses:
        by_origin.setdefault((ip, idir), []).append((t_star, pair))

    events, origin = [], []
    for idir, c in enumerate(dirs):
        for ia, ib in pairs:
            for ta, pa in by_origin.get((ia, idir), ()):
                match = None
                for tb, pb in by_origin.get((ib, idir), ()):
                    if abs(tb - ta) <= match_window and pa * pb < 0.0:
                        if match is None or abs(tb - ta) < abs(match[0] - ta):
                            match = (tb, pb)
                if match is None:
                    continue
                sa = float(params[ia, 0])
                sb = float(params[ib, 0])
                if periodic and ib == 0:
                    sb = float(params[0, 0]) + per
                ev = _solve_sigma_root(
                    sigma, chart, c, (sa, ta, pa), (sb, match[0], match[1]),
                    t_min, sample_step, eps_event, closed_tol, tol)
                if ev is not None:
                    events.append(ev)
                    origin.append((ia, idir))
    return events, origin


def _solve_sigma_root(sigma, chart, c, lo, hi, t_min, sample_step,
                      eps_event, closed_tol, tol):
    """Illinois iteration on the signed arrival pairing over one bracket."""
    sa, ta, fa = lo
    sb, tb, fb = hi

    def arrival(sig, t_ref):
        start = conormal_lift(sigma, chart, np.array([sig]), c)
        traj = integrate_dense(chart, start.phase.x, start.phase.xi,
                               t_ref + 0.6, tol=tol)
        w_lo = max(t_min, t_ref - 0.45)
        w_hi = min(traj.t_end, t_ref + 0.45)
        if w_hi <= w_lo:
            return None
        hits = _detect_crossings(sigma, traj, w_lo, w_hi, sample_step)
        if not hits:
            return None
        t_star = min((h[0] for h in hits), key=lambda t: abs(t - t_ref))
        z = traj.state(np.array([t_star]))[:, 0]
        x_hit, xi_hit = chart.wrap(z[:chart.n]), z[chart.n:]
        s_hit = sigma.nearest(x_hit)
        pair = float(_tangential_pairings(sigma, s_hit, xi_hit)[0])
        return t_star, pair, start, x_hit, xi_hit

    best = None
    side = 0
    for _ in range(60):
        if fb != fa:
            sm = (sa * fb - sb * fa) / (fb - fa)
        else:
            sm = 0.5 * (sa + sb)
        span_lo, span_hi = min(sa, sb), max(sa, sb)
        if not span_lo < sm < span_hi:
            sm = 0.5 * (sa + sb)
        frac = (sm - sa) / (sb - sa) if sb != sa else 0.5
        t_ref = ta + frac * (tb - ta)
        got = arrival(sm, t_ref)
        if got is None:
            return None
        t_star, pm, start, x_hit, xi_hit = got
        if best is None or abs(pm) < abs(best[1]):
            best = (t_star, pm, start, x_hit, xi_hit)
        if abs(pm) <= 0.05 * eps_event or abs(sb - sa) < 1e-13:
            break
        if fa * pm <= 0.0:
            sb, tb, fb = sm, t_star, pm
            if side == -1:
                fa *= 0.5
            side = -1
        else:
            sa, ta, fa = sm, t_star, pm
            if side == 1:
                fb *= 0.5
            side = 1

    t_star, pm, start, x_hit, xi_hit = best
    resid = abs(pm)
    if resid > eps_event:
        return None
    end = _refit_end(sigma, x_hit, xi_hit)
    closed = chart.phase_distance(
        end.phase.x, end.phase.xi, start.phase.x, start.phase.xi) <= closed_tol
    return ReturnEvent(
        t_return=t_star, start=start, end=end, conormal_residual=resid,
        is_closed=bool(closed), degraded=False,
        meta={"truncated": False, "sigma_refined": True})


def _grid_adjacent(params, ipi, ipj, sigma):
    if ipi == ipj:
        return True
    if sigma.dim_sigma != 1 or params.shape[0] < 2:
        return False
    spacing = abs(params[1, 0] - params[0, 0])
    d = abs(params[ipi, 0] - params[ipj, 0])
    P = sigma.param_periods[0] if sigma.param_periods else None
    if P is not None:
        d = min(d, P - d)
    return d <= 1.5 * spacing


def return_times(events, merge_tol: float = 1e-6):
    """Sorted distinct branch times, merging values closer than merge_tol."""
    ts = sorted(ev.t_return for ev in events)
    out = []
    for t in ts:
        if not out or t - out[-1] > merge_tol:
            out.append(float(t))
    return out


def looping_fraction(sigma: Submanifold, chart: Optional[MetricChart], T: float,
                     n_samples: int = 200, seed: int = 20240801,
                     eps_event: float = EPS_EVENT, t_min: float = T_MIN,
                     sample_step: float = SAMPLE_STEP, tol: float = DEFAULT_TOL,
                     detail: bool = False):
    """Monte Carlo fraction of unit conormal starts returning by time T.

    Uses a fixed recorded seed; ``detail`` also reports the binomial
    normal-approximation confidence half-width.
    """
    chart = chart or sigma.chart
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(n_samples):
        s = np.empty(sigma.dim_sigma)
        for i in range(sigma.dim_sigma):
            P = sigma.param_periods[i] if i < len(sigma.param_periods) else None
            if P is not None:
                s[i] = rng.uniform(0.0, P)
            else:
                lo, hi = sigma.param_box[i]
                s[i] = rng.uniform(lo, hi)
        c = rng.normal(size=sigma.codim)
        while np.linalg.norm(c) < 1e-12:
            c = rng.normal(size=sigma.codim)
        start = conormal_lift(sigma, chart, s, c)
        traj = integrate_dense(chart, start.phase.x, start.phase.xi, T, tol=tol)
        t_hi = traj.t_end
        found = False
        if t_hi > t_min:
            if sigma.dim_sigma == 0:
                crossings = _detect_point_hits(sigma, traj, t_min, t_hi, sample_step)
            else:
                crossings = _detect_crossings(sigma, traj, t_min, t_hi, sample_step)
            for t_star, _ in crossings:
                z = traj.state(np.array([t_star]))[:, 0]
                s_hit = sigma.nearest(chart.wrap(z[:chart.n]))
                if _conormal_residual(sigma, s_hit, z[chart.n:]) <= eps_event:
                    found = True
                    break
        hits += int(found)
    frac = hits / n_samples
    if not detail:
        return frac
    half = 1.96 * math.sqrt(max(frac * (1 - frac), 0.0) / n_samples)
    return {"fraction": frac, "half_width": half, "n_samples": n_samples,
            "n_hit": hits, "seed": seed}


# ---------------------------------------------------------------------------
# transversality and closed-orbit scans
# ---------------------------------------------------------------------------

def _conormal_tangent_basis(sigma: Submanifold, s, coeffs, h: float = 1e-6):
    """2n x n basis of the conormal bundle's tangent space at (s, coeffs).

    Columns differentiate (sigma, c) -> (embed(sigma), frame(sigma) c);
    the fiber block includes the radial direction through coeffs.
    """
    n = sigma.chart.n
    k = sigma.dim_sigma
    s = np.atleast_1d(np.asarray(s, float))
    coeffs = np.atleast_1d(np.asarray(coeffs, float))
    F0 = sigma.conormal_frame(s)

    def psi(sig):
        F = sigma.conormal_frame(sig)
        # align frame signs with the center to keep differences smooth
        for j in range(F.shape[1]):
            if np.dot(F[:, j], F0[:, j]) < 0:
                F[:, j] = -F[:, j]
        return np.concatenate([sigma.point(sig), F @ coeffs])

    cols = []
    for j in range(k):
        e = np.zeros(k)
        e[j] = h
        cols.append((psi(s + e) - psi(s - e)) / (2 * h))
    for a in range(n - k):
        col = np.zeros(2 * n)
        col[n:] = F0[:, a]
        cols.append(col)
    B = np.column_stack(cols) if cols else np.zeros((2 * n, 0))
    smin = np.linalg.svd(B, compute_uv=False)[-1] if B.size else 0.0
    if smin < 1e-8:
        raise SearchError("conormal tangent basis is rank deficient")
    return B


def transversality_defect(sigma: Submanifold, chart: Optional[MetricChart],
                          event: ReturnEvent, tol: float = DEFAULT_TOL) -> float:
    """Smallest singular value of the stacked image/target tangent test.

    Pushes an orthonormalized basis of the conormal bundle's tangent space
    at the start through the flow Jacobian, stacks it with one at the
    endpoint, and returns the smallest singular value of the resulting
    square matrix.  Zero means the flowed conormal bundle meets the target
    tangentially (non-isolated intersection); a positive defect certifies
    a transversal, isolated intersection point.
    """
    chart = chart or sigma.chart
    n = chart.n
    B0 = _conormal_tangent_basis(sigma, event.start.sigma_param,
                                 event.start.normal_coeffs)
    B1 = _conormal_tangent_basis(sigma, event.end.sigma_param,
                                 event.end.normal_coeffs)
    jet = integrate_jet(chart, event.start.phase.x, event.start.phase.xi,
                        event.t_return, tol=tol)
    pushed = jet.jacobian @ B0
    for name, blk in (("image", pushed), ("target", B1)):
        if np.linalg.svd(blk, compute_uv=False)[-1] < 1e-8:
            raise SearchError(f"{name} tangent block lost rank")
    Q1, _ = np.linalg.qr(pushed)
    Q2, _ = np.linalg.qr(B1)
    M = np.concatenate([Q1, Q2], axis=1)
    assert M.shape == (2 * n, 2 * n)
    return float(np.linalg.svd(M, compute_uv=False)[-1])


def closed_normal_scan(sigma: Submanifold, chart: Optional[MetricChart], T: float,
                       grid: Optional[int] = None, eig_tol: float = 1e-3,
                       tol: float = DEFAULT_TOL, **opts):
    """Closed conormal returns with the degeneracy of their return map.

    Filters the return branches to closed ones and, for each, counts the
    eigenvalues of the linearized return map on the transversal section
    (the symplectic complement of the flow and fiber-scaling directions)
    that sit within eig_tol of 1.  A count of zero certifies a
    nondegenerate closed normal geodesic.
    """
    chart = chart or sigma.chart
    events = find_returns(sigma, chart, T, grid=grid, tol=tol, **opts)
    out = []
    for ev in events:
        if not ev.is_closed:
            continue
        x, xi = ev.start.phase.x, ev.start.phase.xi
        jet = integrate_jet(chart, x, xi, ev.t_return, tol=tol)
        M = jet.jacobian
        n = chart.n
        G = chart.ginv(x)
        dG = chart.dginv(x)
        v_h = np.concatenate([G @ xi, -0.5 * np.einsum("kij,i,j->k", dG, xi, xi)])
        v_r = np.concatenate([np.zeros(n), xi])
        om = np.array([np.concatenate([v[n:], -v[:n]]) for v in (v_h, v_r)])
        E = null_space(om)
        full = np.column_stack([E, v_h, v_r])
        coeff = np.linalg.solve(full, M @ E)
        dP = coeff[: 2 * n - 2, :]
        mu = np.linalg.eigvals(dP)
        rank_defect = int(np.sum(np.abs(mu - 1.0) <= eig_tol))
        ev.meta["return_map_eigenvalues"] = sorted(
            (float(m.real), float(m.imag)) for m in mu)
        out.append((ev, rank_defect))
    return out


def return_table_csv(rows, path):
    """Write events (or (event, rank_defect) pairs) as a CSV table."""
    header = ("branch_id,t_return,conormal_residual,transversality_defect,"
              "is_closed,rank_defect,degraded")
    lines = [header]
    for row in rows:
        if isinstance(row, tuple):
            ev, rd = row
            rank = str(rd)
        else:
            ev, rank = row, ""
        defect = "" if ev.transversality_defect is None else repr(float(ev.transversality_defect))
        lines.append(",".join([
            str(ev.branch_id), repr(float(ev.t_return)),
            repr(float(ev.conormal_residual)), defect,
            str(int(ev.is_closed)), rank, str(int(ev.degraded)),
        ]))
    Path(path).write_text("\n".join(lines) + "\n")
    return path
