"""Fermi-type tube coordinates along a unit-speed geodesic segment.

Given a 2d chart and a geodesic segment, builds the map
(s, y) -> exp at gamma(s) of y times the unit normal, together with the
pulled-back metric, packaged as a new MetricChart.  On the axis y = 0 the
frame is orthonormal so the pulled-back metric is the identity there; the
first column of the tube Jacobian away from the axis is transported with
the variational jet of the flow, the second is the exact normal-geodesic
velocity.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .charts import Box, MetricChart
from .errors import ChartDomainError
from .flow import DEFAULT_TOL, Trajectory, integrate_dense, integrate_jet
from .util import fd_jacobian

__all__ = ["FermiFrame", "unit_normal", "fermi_frame", "fermi_chart", "fermi_point"]


def unit_normal(chart: MetricChart, x, xi) -> np.ndarray:
    """Metric-unit normal vector to the covector xi at x (2d, left of motion)."""
    x = np.asarray(x, float)
    xi = np.asarray(xi, float)
    G = chart.ginv(x)
    g = np.linalg.inv(G)
    v = G @ xi
    gv = g @ v
    nr = np.array([-gv[1], gv[0]])
    return nr / np.sqrt(nr @ g @ nr)


@dataclass
class FermiFrame:
    """Dense geodesic segment with its unit normal field."""

    chart: MetricChart
    length: float
    base: Trajectory

    def state(self, s: float) -> np.ndarray:
        return self.base.state(float(s))

    def point(self, s: float) -> np.ndarray:
        return self.state(s)[:2]

    def covector(self, s: float) -> np.ndarray:
        return self.state(s)[2:]

    def normal(self, s: float) -> np.ndarray:
        z = self.state(s)
        return unit_normal(self.chart, z[:2], z[2:])

    def normal_covector(self, s: float) -> np.ndarray:
        z = self.state(s)
        g = np.linalg.inv(self.chart.ginv(z[:2]))
        return g @ unit_normal(self.chart, z[:2], z[2:])

    def velocity(self, s: float) -> np.ndarray:
        z = self.state(s)
        return self.chart.ginv(z[:2]) @ z[2:]


def fermi_frame(chart: MetricChart, x0, xi0, length: float,
                tol: float = DEFAULT_TOL) -> FermiFrame:
    """Flow a unit-normalized start for the given arc length, densely."""
    if chart.n != 2:
        raise ValueError("tube coordinates implemented for 2d charts")
    x0 = np.asarray(x0, float)
    xi0 = np.asarray(xi0, float)
    p = chart.symbol(x0, xi0)
    if p <= 0:
        raise ValueError("start covector must be nonzero")
    xi0 = xi0 / np.sqrt(p)
    base = integrate_dense(chart, x0, xi0, float(length), tol=tol)
    if base.exit_reason != "time":
        raise ChartDomainError("segment leaves the chart before the requested length")
    return FermiFrame(chart=chart, length=float(length), base=base)


def _check_embedding(frame: FermiFrame, tube: float, n_probe: int = 121):
    """Refuse tubes around segments that fold back onto themselves."""
    ss = np.linspace(0.0, frame.length, n_probe)
    pts = np.stack([frame.point(s) for s in ss])
    ch = frame.chart
    for i in range(n_probe):
        for j in range(i + 1, n_probe):
            if ss[j] - ss[i] <= 2.2 * tube:
                continue
            d = np.linalg.norm(ch.delta(pts[j], pts[i]))
            if d < 1.9 * tube:
                raise ChartDomainError(
                    "segment approaches itself within the tube width; "
                    "shrink the tube or the segment")


def fermi_point(frame: FermiFrame, s: float, y: float,
                tol: float = DEFAULT_TOL) -> np.ndarray:
    """Chart position of the tube point (s, y)."""
    if abs(y) < 1e-14:
        return frame.point(s)
    z = frame.state(s)
    nu = frame.normal_covector(s)
    end = integrate_jet(frame.chart, z[:2], nu, float(y), tol=tol)
    return end.terminal.x


def fermi_chart(chart: MetricChart, x0, xi0, length: float, tube: float,
                tol: float = DEFAULT_TOL, probe_embedding: bool = True) -> MetricChart:
    """Pulled-back metric chart of a geodesic tube.

    Coordinates are (arc position s, signed normal distance y) with domain
    [0, length] x [-tube, tube].  The inverse metric is assembled pointwise
    from the tube map's Jacobian, so evaluations cost one variational flow
    each; intended for verification and for expressing data near a segment,
    not as a bulk integration chart.
    """
    frame = fermi_frame(chart, x0, xi0, length, tol=tol)
    if probe_embedding:
        _check_embedding(frame, tube)

    def nu_of_state(z):
        g = np.linalg.inv(chart.ginv(z[:2]))
        return g @ unit_normal(chart, z[:2], z[2:])

    def ginv_fn(q):
        s, y = float(q[0]), float(q[1])
        if abs(y) < 1e-10:
            return np.eye(2)
        z = frame.state(s)
        nu = nu_of_state(z)
        # s-derivative of the normal-geodesic initial data (base flow is
        # analytic in s, so differentiate the algebraic frame map there)
        dz_ds = np.concatenate([
            chart.ginv(z[:2]) @ z[2:],
            -0.5 * np.einsum("kij,i,j->k", chart.dginv(z[:2]), z[2:], z[2:]),
        ])
        dnu_dstate = fd_jacobian(nu_of_state, z)
        dstart_ds = np.concatenate([dz_ds[:2], dnu_dstate @ dz_ds])
        jet = integrate_jet(chart, z[:2], nu, y, tol=tol)
        col_s = (jet.jacobian @ dstart_ds)[:2]
        col_y = chart.ginv(jet.terminal.x) @ jet.terminal.xi
        D = np.column_stack([col_s, col_y])
        g_amb = np.linalg.inv(chart.ginv(jet.terminal.x))
        g_tube = D.T @ g_amb @ D
        return np.linalg.inv(g_tube)

    return MetricChart(
        n=2,
        ginv_fn=ginv_fn,
        periods=(None, None),
        domain=Box(lo=(0.0, -tube), hi=(length, tube)),
        flow_hint=None,
        meta={"kind": "geodesic_tube", "frame": frame, "tube": tube,
              "point_fn": lambda s, y: fermi_point(frame, s, y, tol=tol)},
    )
