"""Geodesic flow on the cotangent bundle, with variational (jet) transport.

The flow moves with half the Hamilton field of the quadratic symbol, so a
unit-energy start (p = 1) traces a unit-speed geodesic and return times are
arc lengths.  Integration is adaptive embedded Runge-Kutta 5(4) with dense
output (scipy's RK45); charts carrying an exact backend tag
(flat metrics, round-sphere family) are flowed in closed form instead,
which also covers trajectories through the coordinate poles where the
numeric chart breaks down.  Jets of the exact backends are produced by
complex-step differentiation, so they are accurate to machine precision.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.integrate import solve_ivp

from .charts import MetricChart
from .errors import ChartDomainError, IntegrationError
from .util import cstep_jacobian

__all__ = [
    "PhasePoint",
    "Trajectory",
    "FlowJet",
    "DEFAULT_TOL",
    "integrate",
    "integrate_dense",
    "integrate_jet",
    "homogeneity_check",
    "jacobi_residual",
    "symplectic_defect",
    "gauss_curvature",
    "trajectory_to_csv",
]

DEFAULT_TOL = 1e-10


@dataclass(frozen=True)
class PhasePoint:
    """A cotangent point (x, xi) in chart coordinates."""

    x: np.ndarray
    xi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, float))
        object.__setattr__(self, "xi", np.asarray(self.xi, float))
        if self.x.shape != self.xi.shape or self.x.ndim != 1:
            raise ValueError("x and xi must be equal-length vectors")

    @property
    def n(self):
        return self.x.size

    def as_vector(self):
        return np.concatenate([self.x, self.xi])


@dataclass
class Trajectory:
    """Dense solution of the flow from a fixed start.

    ``state(t)`` evaluates chart coordinates and covector components at any
    time in [0, t_end]; coordinates are defined up to the chart's periodic
    identifications (use ``chart.delta`` for displacements).  ``exit_reason``
    is "time" when the requested horizon was reached and "domain" when the
    trajectory left the chart's validity region first.
    """

    chart: MetricChart
    t_end: float
    state_fn: Callable[[np.ndarray], np.ndarray]
    exit_reason: str = "time"
    meta: dict = field(default_factory=dict)

    def state(self, t):
        return self.state_fn(np.asarray(t, float))

    def phase(self, t) -> PhasePoint:
        z = self.state(float(t))
        n = self.chart.n
        return PhasePoint(self.chart.wrap(z[:n]), z[n:])

    @property
    def terminal(self) -> PhasePoint:
        return self.phase(self.t_end)


@dataclass
class FlowJet:
    """Terminal phase point together with the flow Jacobian.

    ``jacobian`` is the 2n x 2n derivative of the time-t flow map in
    (x, xi) block order.  When built densely, ``jet_fn(t)`` returns the
    (2n + 2n*2n,) combined state at intermediate times.
    """

    t: float
    terminal: PhasePoint
    jacobian: np.ndarray
    jet_fn: Optional[Callable[[float], np.ndarray]] = None
    chart: Optional[MetricChart] = None

    def state_at(self, t):
        if self.jet_fn is None:
            raise ValueError("jet was not built with dense output")
        z = np.asarray(self.jet_fn(float(t)), float)
        n = self.terminal.n
        return z[: 2 * n], z[2 * n:].reshape(2 * n, 2 * n)


# ---------------------------------------------------------------------------
# exact backends
# ---------------------------------------------------------------------------

def _casin(z):
    """arcsin for real input or complex-step input (first order in Im)."""
    if np.iscomplexobj(z):
        zr = np.real(z)
        return np.arcsin(zr) + 1j * np.imag(z) / np.sqrt(1.0 - zr * zr)
    return np.arcsin(z)


def _catan2(y, x):
    """atan2 for real input or complex-step input (first order in Im)."""
    if np.iscomplexobj(y) or np.iscomplexobj(x):
        xr, yr = np.real(x), np.real(y)
        r2 = xr * xr + yr * yr
        return np.arctan2(yr, xr) + 1j * (xr * np.imag(y) - yr * np.imag(x)) / r2
    return np.arctan2(y, x)


class StraightLineFlow:
    """Closed-form flow for identity-metric charts: x(t) = x + t xi."""

    def __init__(self, chart: MetricChart):
        self.chart = chart

    def state(self, x, xi, t):
        x = np.asarray(x, float)
        xi = np.asarray(xi, float)
        t = np.asarray(t, float)
        if t.ndim == 0:
            return np.concatenate([x + t * xi, xi])
        pos = x[:, None] + t[None, :] * xi[:, None]
        cov = np.repeat(xi[:, None], t.size, axis=1)
        return np.vstack([pos, cov])

    def jacobian(self, x, xi, t):
        n = len(x)
        J = np.eye(2 * n)
        J[:n, n:] = float(t) * np.eye(n)
        return J


class GreatCircleFlow:
    """Closed-form flow for round-sphere charts (longitude, latitude).

    Works through the coordinate poles by moving in the ambient unit
    sphere; endpoints evaluated at a pole itself are singular chart points
    and should be avoided by callers.
    """

    def __init__(self, chart: MetricChart):
        self.chart = chart

    @staticmethod
    def _map(z4, t):
        phi, u, xphi, xu = z4
        cu, su = np.cos(u), np.sin(u)
        cp, sp = np.cos(phi), np.sin(phi)
        P = np.stack([cp * cu, sp * cu, su])
        # chart velocities for the half-Hamilton flow
        phid = xphi / (cu * cu)
        ud = xu
        V = np.stack([
            -sp * cu * phid - cp * su * ud,
            cp * cu * phid - sp * su * ud,
            cu * ud,
        ])
        w = np.sqrt(V[0] * V[0] + V[1] * V[1] + V[2] * V[2])
        t_arr = np.atleast_1d(np.asarray(t, float))
        ct, st = np.cos(w * t_arr), np.sin(w * t_arr)
        Pt = P[:, None] * ct[None, :] + (V[:, None] / w) * st[None, :]
        Vt = -w * P[:, None] * st[None, :] + V[:, None] * ct[None, :]
        u1 = _casin(Pt[2])
        phi1 = _catan2(Pt[1], Pt[0])
        cu1 = np.sqrt(Pt[0] * Pt[0] + Pt[1] * Pt[1])
        ud1 = Vt[2] / cu1
        phid1 = (Pt[0] * Vt[1] - Pt[1] * Vt[0]) / (cu1 * cu1)
        out = np.stack([phi1, u1, phid1 * cu1 * cu1, ud1])
        return out[:, 0] if np.ndim(t) == 0 else out

    def state(self, x, xi, t):
        z4 = np.concatenate([np.asarray(x, float), np.asarray(xi, float)])
        if float(np.dot(z4[2:], z4[2:])) == 0.0:
            t = np.asarray(t, float)
            if t.ndim == 0:
                return z4
            return np.repeat(z4[:, None], t.size, axis=1)
        return self._map(z4, np.asarray(t, float))

    def jacobian(self, x, xi, t):
        z4 = np.concatenate([np.asarray(x, float), np.asarray(xi, float)])
        return cstep_jacobian(lambda z: self._map(z, float(t)), z4)


_EXACT_BACKENDS = {
    "straight_line": StraightLineFlow,
    "great_circle": GreatCircleFlow,
}


def _exact_flow(chart: MetricChart):
    if chart.flow_hint is None:
        return None
    inst = chart.meta.get("_exact_flow")
    if inst is None:
        inst = _EXACT_BACKENDS[chart.flow_hint](chart)
        chart.meta["_exact_flow"] = inst
    return inst


# ---------------------------------------------------------------------------
# numeric path
# ---------------------------------------------------------------------------

def _phase_rhs(chart: MetricChart):
    n = chart.n

    def rhs(t, z):
        x, xi = z[:n], z[n:]
        G = chart.ginv(x)
        dG = chart.dginv(x)
        dx = G @ xi
        dxi = -0.5 * np.einsum("kij,i,j->k", dG, xi, xi)
        return np.concatenate([dx, dxi])

    return rhs


def _jet_rhs(chart: MetricChart):
    n = chart.n

    def rhs(t, z):
        x, xi = z[:n], z[n:2 * n]
        J = z[2 * n:].reshape(2 * n, 2 * n)
        G = chart.ginv(x)
        dG = chart.dginv(x)
        d2G = chart.d2ginv(x)
        dx = G @ xi
        dxi = -0.5 * np.einsum("kij,i,j->k", dG, xi, xi)
        M1 = np.einsum("kij,j->ik", dG, xi)
        M2 = -0.5 * np.einsum("klij,i,j->kl", d2G, xi, xi)
        A = np.block([[M1, G], [M2, -M1.T]])
        return np.concatenate([dx, dxi, (A @ J).ravel()])

    return rhs


def _domain_events(chart: MetricChart):
    if chart.domain is None:
        return None

    def boundary(t, z):
        return chart.domain.boundary_distance(z[:chart.n])

    boundary.terminal = True
    boundary.direction = -1
    return [boundary]


def _solve(chart, z0, t, tol, rhs, dense):
    if t == 0.0:
        raise ValueError("integration time must be nonzero")
    events = _domain_events(chart)
    # cap the step so localized metric features cannot fall between solver
    # stages; charts with narrow features tighten the cap via meta
    max_step = float(chart.meta.get("max_step", 0.25))
    sol = solve_ivp(
        rhs, (0.0, t), z0, method="RK45", rtol=tol, atol=tol,
        dense_output=True, events=events, max_step=max_step,
    )
    if sol.status == -1:
        raise IntegrationError(f"integrator failed: {sol.message}")
    exited = sol.status == 1
    t_end = float(sol.t[-1])
    return sol, t_end, ("domain" if exited else "time")


# ---------------------------------------------------------------------------
# public entry points
# ---------------------------------------------------------------------------

def integrate_dense(chart: MetricChart, x, xi, t: float,
                    tol: float = DEFAULT_TOL, force_numeric: bool = False) -> Trajectory:
    """Flow (x, xi) for time t and return the dense trajectory."""
    x = np.asarray(x, float)
    xi = np.asarray(xi, float)
    backend = None if force_numeric else _exact_flow(chart)
    if backend is not None:
        return Trajectory(
            chart=chart, t_end=float(t),
            state_fn=lambda s, b=backend: b.state(x, xi, s),
            exit_reason="time", meta={"backend": chart.flow_hint},
        )
    z0 = np.concatenate([x, xi])
    sol, t_end, reason = _solve(chart, z0, float(t), tol, _phase_rhs(chart), True)
    return Trajectory(chart=chart, t_end=t_end, state_fn=sol.sol,
                      exit_reason=reason, meta={"backend": "rk45", "tol": tol})


def integrate(chart: MetricChart, x, xi, t: float,
              tol: float = DEFAULT_TOL, force_numeric: bool = False) -> PhasePoint:
    """Flow (x, xi) for time t and return the terminal phase point.

    Raises ChartDomainError if the trajectory leaves the chart first.
    """
    traj = integrate_dense(chart, x, xi, t, tol=tol, force_numeric=force_numeric)
    if traj.exit_reason != "time":
        raise ChartDomainError(
            f"trajectory left the chart at t = {traj.t_end:.6g} before {t:.6g}")
    return traj.terminal


def integrate_jet(chart: MetricChart, x, xi, t: float,
                  tol: float = DEFAULT_TOL, force_numeric: bool = False,
                  dense: bool = False) -> FlowJet:
    """Flow with the variational system; returns terminal point and Jacobian."""
    x = np.asarray(x, float)
    xi = np.asarray(xi, float)
    n = chart.n
    backend = None if force_numeric else _exact_flow(chart)
    if backend is not None:
        z = backend.state(x, xi, float(t))
        J = backend.jacobian(x, xi, float(t))
        term = PhasePoint(chart.wrap(z[:n]), z[n:])
        jet_fn = None
        if dense:
            def jet_fn(s, b=backend):
                zs = b.state(x, xi, s)
                Js = b.jacobian(x, xi, s)
                return np.concatenate([zs, Js.ravel()])
        return FlowJet(t=float(t), terminal=term, jacobian=J, jet_fn=jet_fn, chart=chart)
    z0 = np.concatenate([x, xi, np.eye(2 * n).ravel()])
    sol, t_end, reason = _solve(chart, z0, float(t), tol, _jet_rhs(chart), dense)
    if reason != "time":
        raise ChartDomainError(
            f"trajectory left the chart at t = {t_end:.6g} before {t:.6g}")
    zT = sol.sol(t_end)
    term = PhasePoint(chart.wrap(zT[:n]), zT[n:2 * n])
    J = zT[2 * n:].reshape(2 * n, 2 * n)
    return FlowJet(t=float(t), terminal=term, jacobian=J,
                   jet_fn=(sol.sol if dense else None), chart=chart)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def symplectic_defect(J: np.ndarray) -> float:
    """Max-norm of J^T Omega J - Omega for the standard symplectic form."""
    n2 = J.shape[0]
    n = n2 // 2
    Om = np.block([[np.zeros((n, n)), np.eye(n)], [-np.eye(n), np.zeros((n, n))]])
    return float(np.max(np.abs(J.T @ Om @ J - Om)))


def homogeneity_check(chart: MetricChart, x, xi, t: float,
                      c_values=(0.5, 2.0), tol: float = DEFAULT_TOL,
                      force_numeric: bool = False) -> float:
    """Defect of the fiber scaling relation flow_t(x, c xi) = (X(ct), c Xi(ct)).

    Returns the largest phase distance over the requested scalings.
    """
    worst = 0.0
    base = integrate_dense(chart, x, xi, t * max(c_values), tol=tol,
                           force_numeric=force_numeric)
    if base.exit_reason != "time":
        raise ChartDomainError("base trajectory left the chart")
    n = chart.n
    for c in c_values:
        scaled = integrate(chart, x, np.asarray(xi, float) * c, t, tol=tol,
                           force_numeric=force_numeric)
        ref = base.state(c * t)
        d = chart.phase_distance(scaled.x, scaled.xi,
                                 chart.wrap(ref[:n]), c * ref[n:])
        worst = max(worst, d)
    return worst


def gauss_curvature(chart: MetricChart, x, h: float = 1e-4) -> float:
    """Gauss curvature of a 2d chart by central differences of the metric."""
    if chart.n != 2:
        raise ValueError("curvature implemented for 2d charts")
    x = np.asarray(x, float)

    def g_at(y):
        return np.linalg.inv(chart.ginv(y))

    E = {}
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            E[(di, dj)] = g_at(x + np.array([di * h, dj * h]))

    g0 = E[(0, 0)]
    gx = (E[(1, 0)] - E[(-1, 0)]) / (2 * h)
    gy = (E[(0, 1)] - E[(0, -1)]) / (2 * h)
    gxx = (E[(1, 0)] - 2 * g0 + E[(-1, 0)]) / (h * h)
    gyy = (E[(0, 1)] - 2 * g0 + E[(0, -1)]) / (h * h)
    gxy = (E[(1, 1)] - E[(1, -1)] - E[(-1, 1)] + E[(-1, -1)]) / (4 * h * h)

    e, f, g = g0[0, 0], g0[0, 1], g0[1, 1]
    ex, ey = gx[0, 0], gy[0, 0]
    fx, fy = gx[0, 1], gy[0, 1]
    gxv, gyv = gx[1, 1], gy[1, 1]

    # Brioschi determinants in E, F, G and their first/second derivatives
    M1 = np.array([
        [-0.5 * gyy[0, 0] + gxy[0, 1] - 0.5 * gxx[1, 1], 0.5 * ex, fx - 0.5 * ey],
        [fy - 0.5 * gxv, e, f],
        [0.5 * gyv, f, g],
    ])
    M2 = np.array([
        [0.0, 0.5 * ey, 0.5 * gxv],
        [0.5 * ey, e, f],
        [0.5 * gxv, f, g],
    ])
    det = e * g - f * f
    return float((np.linalg.det(M1) - np.linalg.det(M2)) / (det * det))


def jacobi_residual(chart: MetricChart, x, xi, t_span: float,
                    n_samples: int = 101, tol: float = DEFAULT_TOL,
                    force_numeric: bool = False) -> dict:
    """Residual of the scalar normal Jacobi equation J'' + K J = 0.

    Takes a unit-energy start on a 2d chart, transports the variational
    column with initial data (normal direction, 0), projects onto the
    parallel unit normal, and differences the resulting scalar on a uniform
    grid.  Returns the max interior residual together with the sampled
    arrays.
    """
    if chart.n != 2:
        raise ValueError("jacobi_residual is for 2d models")
    x = np.asarray(x, float)
    xi = np.asarray(xi, float)
    p0 = chart.symbol(x, xi)
    if abs(p0 - 1.0) > 1e-8:
        raise ValueError("start must have unit energy")

    jet = integrate_jet(chart, x, xi, t_span, tol=tol, dense=True,
                        force_numeric=force_numeric)
    ts = np.linspace(0.0, t_span, n_samples)

    def normal_at(xc, xic):
        g = np.linalg.inv(chart.ginv(xc))
        v = chart.ginv(xc) @ xic
        gv = g @ v
        nr = np.array([-gv[1], gv[0]])
        return nr / np.sqrt(nr @ g @ nr)

    N0 = normal_at(x, xi)
    w0 = np.concatenate([N0, np.zeros(2)])

    Jst = np.empty(n_samples)
    Ks = np.empty(n_samples)
    for i, s in enumerate(ts):
        z, Jac = jet.state_at(s)
        xc, xic = z[:2], z[2:]
        w = Jac @ w0
        g = np.linalg.inv(chart.ginv(xc))
        Nc = normal_at(xc, xic)
        Jst[i] = w[:2] @ g @ Nc
        Ks[i] = gauss_curvature(chart, xc)

    h = ts[1] - ts[0]
    resid = np.zeros(n_samples)
    for i in range(2, n_samples - 2):
        d2 = (-Jst[i - 2] + 16 * Jst[i - 1] - 30 * Jst[i]
              + 16 * Jst[i + 1] - Jst[i + 2]) / (12 * h * h)
        resid[i] = d2 + Ks[i] * Jst[i]
    max_resid = float(np.max(np.abs(resid[2:-2]))) if n_samples > 4 else 0.0
    return {"t": ts, "J": Jst, "K": Ks, "residual": resid, "max_residual": max_resid}


def trajectory_to_csv(traj: Trajectory, path, n_samples: int = 201):
    """Sample a trajectory uniformly and write t, x, xi, p rows."""
    ts = np.linspace(0.0, traj.t_end, n_samples)
    n = traj.chart.n
    cols = (["t"] + [f"x{i+1}" for i in range(n)]
            + [f"xi{i+1}" for i in range(n)] + ["p"])
    lines = [",".join(cols)]
    for s in ts:
        z = traj.state(float(s))
        xw = traj.chart.wrap(z[:n])
        p = traj.chart.symbol(xw, z[n:])
        vals = [s] + list(xw) + list(z[n:]) + [p]
        lines.append(",".join(repr(float(v)) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")
    return path
