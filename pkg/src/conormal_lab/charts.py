"""Metric charts and the model zoo.

A manifold is represented by a single chart with optional periodic
identifications, so a flat torus is a box with both directions periodic and
a round sphere is a longitude/latitude box with the polar caps excluded.
All geometry enters through the inverse metric ``ginv`` and its coordinate
derivatives; the quadratic symbol and the Hamilton field are derived from
those.

Conventions
-----------
* Points are plain float arrays of length ``n`` (chart coordinates).
* ``ginv(x)`` is the (n, n) inverse metric matrix at x.
* ``dginv(x)[k]`` is the partial derivative of ``ginv`` along coordinate k.
* ``d2ginv(x)[k, l]`` is the second partial along coordinates k then l.
* The symbol is ``p(x, xi) = xi . ginv(x) . xi`` (no 1/2 factor).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError
from .util import mollifier, mollifier_d1, periodic_delta, wrap_periodic

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

__all__ = [
    "Box",
    "MetricChart",
    "ManifoldModel",
    "MODEL_NAMES",
    "make_model",
    "model_from_config",
    "symbol",
    "hamilton_field",
    "scale_chart",
    "affine_rescale_chart",
    "export_grid_csv",
]

TWO_PI = 2.0 * np.pi

MODEL_NAMES = (
    "flat_torus",
    "round_sphere",
    "half_turn_quotient",
    "conformal_bump_torus",
    "fermi_segment",
)


@dataclass
class Box:
    """Axis-aligned validity box; ``None`` bounds mean unbounded."""

    lo: tuple
    hi: tuple

    def contains(self, x, margin=0.0):
        x = np.asarray(x, float)
        for i, (a, b) in enumerate(zip(self.lo, self.hi)):
            if a is not None and x[i] < a + margin:
                return False
            if b is not None and x[i] > b - margin:
                return False
        return True

    def boundary_distance(self, x):
        """Smallest signed distance to the bounded faces (positive inside)."""
        x = np.asarray(x, float)
        d = np.inf
        for i, (a, b) in enumerate(zip(self.lo, self.hi)):
            if a is not None:
                d = min(d, x[i] - a)
            if b is not None:
                d = min(d, b - x[i])
        return d


@dataclass
class MetricChart:
    """A single-chart Riemannian metric given by its inverse matrix field.

    Parameters
    ----------
    n : dimension of the chart.
    ginv_fn : callable, x -> (n, n) symmetric positive definite array.
    dginv_fn : callable or None, x -> (n, n, n) array of first derivatives,
        indexed [k, i, j] = d g^{ij} / d x_k.  When None, central
        differences of ``ginv_fn`` with step 1e-5 (1 + |x|) are used.
    d2ginv_fn : callable or None, x -> (n, n, n, n) second derivatives,
        indexed [k, l, i, j].  When None, central differences of ``dginv``.
    periods : per-coordinate period or None.
    domain : optional Box of chart validity (periodic directions excluded).
    flow_hint : optional tag naming an exact flow backend ("straight_line",
        "great_circle"); consumed by the flow module.
    meta : free-form metadata (model name, build parameters).
    """

    n: int
    ginv_fn: Callable[[np.ndarray], np.ndarray]
    dginv_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None
    d2ginv_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None
    periods: tuple = None
    domain: Optional[Box] = None
    flow_hint: Optional[str] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.periods is None:
            self.periods = (None,) * self.n
        self.periods = tuple(self.periods)
        if len(self.periods) != self.n:
            raise ValueError("periods length must equal chart dimension")

    # -- coordinate bookkeeping -------------------------------------------
    def wrap(self, x):
        return wrap_periodic(np.asarray(x, float), self.periods)

    def delta(self, a, b):
        """Shortest displacement a - b across periodic identifications."""
        return periodic_delta(a, b, self.periods)

    def phase_distance(self, xa, xia, xb, xib):
        """Euclidean phase-space distance modulo periodic identifications."""
        dx = self.delta(xa, xb)
        dxi = np.asarray(xia, float) - np.asarray(xib, float)
        return float(np.sqrt(np.dot(dx, dx) + np.dot(dxi, dxi)))

    def contains(self, x, margin=0.0):
        if self.domain is None:
            return True
        return self.domain.contains(self.wrap(x), margin=margin)

    # -- metric data -------------------------------------------------------
    def ginv(self, x):
        return np.asarray(self.ginv_fn(self.wrap(x)), float)

    def dginv(self, x):
        x = self.wrap(x)
        if self.dginv_fn is not None:
            return np.asarray(self.dginv_fn(x), float)
        h = 1e-5 * (1.0 + float(np.linalg.norm(x)))
        out = np.empty((self.n, self.n, self.n), float)
        for k in range(self.n):
            dx = np.zeros(self.n)
            dx[k] = h
            out[k] = (np.asarray(self.ginv_fn(x + dx), float)
                      - np.asarray(self.ginv_fn(x - dx), float)) / (2.0 * h)
        return out

    def d2ginv(self, x):
        x = self.wrap(x)
        if self.d2ginv_fn is not None:
            return np.asarray(self.d2ginv_fn(x), float)
        h = 1e-5 * (1.0 + float(np.linalg.norm(x)))
        out = np.empty((self.n, self.n, self.n, self.n), float)
        for k in range(self.n):
            dx = np.zeros(self.n)
            dx[k] = h
            out[k] = (self.dginv(x + dx) - self.dginv(x - dx)) / (2.0 * h)
        return out

    def g(self, x):
        """The metric matrix itself (inverse of ``ginv``)."""
        return np.linalg.inv(self.ginv(x))

    # -- symbol ------------------------------------------------------------
    def symbol(self, x, xi):
        return symbol(self, x, xi)

    def hamilton(self, x, xi):
        return hamilton_field(self, x, xi)


def symbol(chart: MetricChart, x, xi) -> float:
    """Quadratic symbol p(x, xi) = sum_ij g^{ij}(x) xi_i xi_j."""
    xi = np.asarray(xi, float)
    return float(xi @ chart.ginv(x) @ xi)


def hamilton_field(chart: MetricChart, x, xi) -> np.ndarray:
    """Hamilton field of the symbol, (dp/dxi, -dp/dx), as a 2n vector.

    The geodesic flow used by the flow module moves with half this field,
    so that unit-energy trajectories are unit speed.
    """
    xi = np.asarray(xi, float)
    G = chart.ginv(x)
    dG = chart.dginv(x)
    dp_dxi = 2.0 * G @ xi
    dp_dx = np.einsum("kij,i,j->k", dG, xi, xi)
    return np.concatenate([dp_dxi, -dp_dx])


# ---------------------------------------------------------------------------
# model zoo
# ---------------------------------------------------------------------------

@dataclass
class ManifoldModel:
    """A zoo entry: a named chart plus the parameters used to build it."""

    name: str
    params: dict
    chart: MetricChart


def _flat_torus(periods=(TWO_PI, TWO_PI)):
    periods = tuple(float(p) for p in periods)
    n = len(periods)
    eye = np.eye(n)
    zeros1 = np.zeros((n, n, n))
    zeros2 = np.zeros((n, n, n, n))
    return MetricChart(
        n=n,
        ginv_fn=lambda x: eye,
        dginv_fn=lambda x: zeros1,
        d2ginv_fn=lambda x: zeros2,
        periods=periods,
        flow_hint="straight_line",
        meta={"model": "flat_torus",
              "ginv_batch": lambda xs: np.broadcast_to(eye, (len(xs), n, n))},
    )


def _sphere_ginv(x):
    c = np.cos(x[1])
    return np.array([[1.0 / (c * c), 0.0], [0.0, 1.0]])


def _sphere_dginv(x):
    s, c = np.sin(x[1]), np.cos(x[1])
    out = np.zeros((2, 2, 2))
    out[1, 0, 0] = 2.0 * s / c**3
    return out


def _sphere_d2ginv(x):
    s, c = np.sin(x[1]), np.cos(x[1])
    out = np.zeros((2, 2, 2, 2))
    out[1, 1, 0, 0] = 2.0 * (1.0 + 2.0 * s * s) / c**4
    return out


def _round_sphere(delta_pole=0.1, longitude_period=TWO_PI, model_name="round_sphere"):
    cap = 0.5 * np.pi - float(delta_pole)
    return MetricChart(
        n=2,
        ginv_fn=_sphere_ginv,
        dginv_fn=_sphere_dginv,
        d2ginv_fn=_sphere_d2ginv,
        periods=(float(longitude_period), None),
        domain=Box(lo=(None, -cap), hi=(None, cap)),
        flow_hint="great_circle",
        meta={"model": model_name, "delta_pole": float(delta_pole)},
    )


class _BumpSum:
    """Sum of compactly supported bumps on a periodic box.

    Two kinds are supported:

    * radial: amplitude * mollifier(|x - center| / radius)
    * band: amplitude * mollifier((x_axis - center) / radius)
      * (1 + modulation * cos(x_other - phase)), localized in one
      coordinate and wrapping around the other.
    """

    def __init__(self, bumps, periods):
        self.bumps = bumps
        self.periods = periods

    def value(self, x):
        f = 0.0
        for b in self.bumps:
            f += self._one(b, x)[0]
        return f

    def value_batch(self, xs):
        """Vectorized value over an (m, n) array of points."""
        xs = np.asarray(xs, float)
        f = np.zeros(xs.shape[0])
        for b in self.bumps:
            kind = b.get("kind", "radial")
            amp = float(b["amplitude"])
            r = float(b["radius"])
            if kind == "radial":
                c = np.asarray(b["center"], float)
                d = xs - c[None, :]
                for ax, P in enumerate(self.periods):
                    if P is not None:
                        d[:, ax] = (d[:, ax] + 0.5 * P) % P - 0.5 * P
                f += amp * mollifier(np.linalg.norm(d, axis=1) / r)
            else:
                ax = int(b["axis"])
                other = 1 - ax
                dc = xs[:, ax] - float(b["center"])
                P = self.periods[ax]
                if P is not None:
                    dc = (dc + 0.5 * P) % P - 0.5 * P
                trig = 1.0 + float(b.get("modulation", 0.0)) * np.cos(
                    xs[:, other] - float(b.get("phase", 0.0)))
                f += amp * mollifier(dc / r) * trig
        return f

    def grad(self, x):
        g = np.zeros(len(x))
        for b in self.bumps:
            g += self._one(b, x)[1]
        return g

    def _one(self, b, x):
        kind = b.get("kind", "radial")
        amp = float(b["amplitude"])
        r = float(b["radius"])
        if kind == "radial":
            d = periodic_delta(x, np.asarray(b["center"], float), self.periods)
            rho = float(np.linalg.norm(d))
            z = rho / r
            val = amp * float(mollifier(z))
            if rho < 1e-12 or z >= 1.0:
                return val, np.zeros(len(x))
            grad = amp * float(mollifier_d1(z)) / r * (d / rho)
            return val, grad
        if kind == "band":
            ax = int(b["axis"])
            other = 1 - ax
            P = self.periods[ax]
            dc = float(x[ax]) - float(b["center"])
            if P is not None:
                dc = (dc + 0.5 * P) % P - 0.5 * P
            z = dc / r
            prof = float(mollifier(z))
            dprof = float(mollifier_d1(z)) / r
            mod_amp = float(b.get("modulation", 0.0))
            phase = float(b.get("phase", 0.0))
            trig = 1.0 + mod_amp * np.cos(x[other] - phase)
            dtrig = -mod_amp * np.sin(x[other] - phase)
            val = amp * prof * trig
            grad = np.zeros(len(x))
            grad[ax] = amp * dprof * trig
            grad[other] = amp * prof * dtrig
            return val, grad
        raise ConfigError(f"unknown bump kind {kind!r}")


def _conformal_bump_torus(periods=(TWO_PI, TWO_PI), bumps=()):
    periods = tuple(float(p) for p in periods)
    n = len(periods)
    if n != 2:
        raise ConfigError("conformal_bump_torus is two dimensional")
    bumps = [dict(b) for b in bumps]
    fsum = _BumpSum(bumps, periods)
    eye = np.eye(n)

    # reject conformal factors that lose positivity anywhere
    grid = np.linspace(0.0, periods[0], 41)
    gridy = np.linspace(0.0, periods[1], 41)
    for gx in grid:
        for gy in gridy:
            if 1.0 + fsum.value(np.array([gx, gy])) < 0.05:
                raise ConfigError("bump amplitudes drive 1 + f below 0.05")

    def ginv_fn(x):
        return eye / (1.0 + fsum.value(x))

    def dginv_fn(x):
        w = 1.0 + fsum.value(x)
        gr = fsum.grad(x)
        out = np.zeros((n, n, n))
        for k in range(n):
            out[k] = (-gr[k] / (w * w)) * eye
        return out

    chart = MetricChart(
        n=n,
        ginv_fn=ginv_fn,
        dginv_fn=dginv_fn,
        periods=periods,
        flow_hint=None,
        meta={"model": "conformal_bump_torus", "bumps": bumps},
    )
    chart.meta["conformal_value"] = fsum.value
    chart.meta["conformal_grad"] = fsum.grad
    chart.meta["conformal_value_batch"] = fsum.value_batch
    chart.meta["ginv_batch"] = lambda xs: (
        eye[None, :, :] / (1.0 + fsum.value_batch(xs))[:, None, None])
    return chart


def _fermi_segment(tube=0.5, model_name="fermi_segment"):
    """Analytic infinite-strip chart around a unit-speed geodesic.

    The metric diag(1/cos^2 x2, 1) is the normal-coordinate form around a
    closed geodesic of the round sphere; the strip |x2| <= tube is the
    validity region.  Axis coordinate unbounded, nothing periodic, so the
    chart exercises the numeric flow path on a curved metric.
    """
    tube = float(tube)
    return MetricChart(
        n=2,
        ginv_fn=_sphere_ginv,
        dginv_fn=_sphere_dginv,
        d2ginv_fn=_sphere_d2ginv,
        periods=(None, None),
        domain=Box(lo=(None, -tube), hi=(None, tube)),
        flow_hint=None,
        meta={"model": model_name, "tube": tube},
    )


_BUILDERS = {
    "flat_torus": _flat_torus,
    "round_sphere": _round_sphere,
    "conformal_bump_torus": _conformal_bump_torus,
    "fermi_segment": _fermi_segment,
}

_MODEL_KEYS = {
    "flat_torus": {"periods"},
    "round_sphere": {"delta_pole"},
    "half_turn_quotient": {"delta_pole"},
    "conformal_bump_torus": {"periods", "bumps"},
    "fermi_segment": {"tube"},
}


def make_model(name: str, **params) -> ManifoldModel:
    """Build a zoo model by name.  Unknown names or parameters raise."""
    if name not in MODEL_NAMES:
        raise ConfigError(f"unknown model {name!r}; choose from {MODEL_NAMES}")
    extra = set(params) - _MODEL_KEYS[name]
    if extra:
        raise ConfigError(f"unknown parameters {sorted(extra)} for model {name!r}")
    if name == "half_turn_quotient":
        chart = _round_sphere(longitude_period=np.pi, model_name=name, **params)
    else:
        chart = _BUILDERS[name](**params)
    return ManifoldModel(name=name, params=dict(params), chart=chart)


def model_from_config(source) -> ManifoldModel:
    """Read a model from a TOML file, path, or an equivalent dict.

    Schema (version 1)::

        schema = 1
        [model]
        name = "conformal_bump_torus"
        periods = [6.2831853, 6.2831853]
        [[model.bumps]]
        kind = "radial"
        center = [3.1, 3.1]
        radius = 0.5
        amplitude = 0.1

    Unknown keys anywhere are an error.
    """
    cfg = _load_config(source)
    allowed_top = {"schema", "model"}
    _check_keys(cfg, allowed_top, "top level")
    if cfg.get("schema") != 1:
        raise ConfigError("config must declare schema = 1")
    if "model" not in cfg:
        raise ConfigError("config must contain a [model] table")
    mdl = dict(cfg["model"])
    name = mdl.pop("name", None)
    if name is None:
        raise ConfigError("[model] requires a name")
    return make_model(name, **mdl)


def _load_config(source) -> dict:
    if isinstance(source, dict):
        return source
    p = Path(source)
    try:
        with open(p, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed TOML in {p}: {exc}") from exc


def _check_keys(table: dict, allowed, where: str):
    extra = set(table) - set(allowed)
    if extra:
        raise ConfigError(f"unknown keys {sorted(extra)} at {where}")


# ---------------------------------------------------------------------------
# chart rescaling
# ---------------------------------------------------------------------------

def affine_rescale_chart(chart: MetricChart, center, factor: float,
                         meta_tag: str = "rescaled") -> MetricChart:
    """Chart for the same metric in coordinates y = center + factor (x - center).

    Only the argument of the metric functions changes (plain composition),
    so curvature-scale quantities shrink with the factor: first derivatives
    pick up one factor, second derivatives two.
    """
    center = np.asarray(center, float)
    factor = float(factor)

    def to_base(x):
        return center + factor * (np.asarray(x, float) - center)

    return MetricChart(
        n=chart.n,
        ginv_fn=lambda x: chart.ginv(to_base(x)),
        dginv_fn=lambda x: factor * chart.dginv(to_base(x)),
        d2ginv_fn=lambda x: factor * factor * chart.d2ginv(to_base(x)),
        periods=(None,) * chart.n,
        domain=None,
        flow_hint=None,
        meta={**_plain_meta(chart.meta), meta_tag: factor},
    )


def _plain_meta(meta):
    # drop cached callables tied to the source chart's coordinates
    drop = ("ginv_batch", "conformal_value", "conformal_grad",
            "conformal_value_batch", "_exact_flow", "point_fn", "frame")
    return {k: v for k, v in meta.items() if k not in drop}


def scale_chart(chart: MetricChart, eps: float) -> MetricChart:
    """Zoom the chart toward the axis endpoint e1 = (1, 0, ..., 0).

    Returns the chart of g(eps; x) = g(e1 + eps (x - e1)).  At eps = 1 this
    is the original chart; as eps -> 0 the metric freezes at its value at
    e1, so on a normal-coordinate chart it tends to the identity.  Second
    x-derivatives of the symbol carry an eps^2 factor.
    """
    eps = float(eps)
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    e1 = np.zeros(chart.n)
    e1[0] = 1.0
    if eps == 0.0:
        G0 = chart.ginv(e1)
        z1 = np.zeros((chart.n,) * 3)
        z2 = np.zeros((chart.n,) * 4)
        return MetricChart(
            n=chart.n,
            ginv_fn=lambda x: G0,
            dginv_fn=lambda x: z1,
            d2ginv_fn=lambda x: z2,
            periods=(None,) * chart.n,
            meta={**_plain_meta(chart.meta), "scaled": 0.0},
        )
    return affine_rescale_chart(chart, e1, eps, meta_tag="scaled")


# ---------------------------------------------------------------------------
# inspection
# ---------------------------------------------------------------------------

def export_grid_csv(chart: MetricChart, path, n1=32, n2=32, box=None):
    """Sample ginv on a grid and write rows x1, x2, g11, g12, g22."""
    if chart.n != 2:
        raise ValueError("grid export implemented for 2d charts")
    if box is None:
        lo = [0.0, 0.0]
        hi = [p if p is not None else 1.0 for p in chart.periods]
        if chart.domain is not None:
            for i, (a, b) in enumerate(zip(chart.domain.lo, chart.domain.hi)):
                if a is not None:
                    lo[i] = a
                if b is not None:
                    hi[i] = b
    else:
        lo, hi = box
    xs = np.linspace(lo[0], hi[0], n1)
    ys = np.linspace(lo[1], hi[1], n2)
    lines = ["x1,x2,g11,g12,g22"]
    for x1 in xs:
        for x2 in ys:
            G = chart.ginv(np.array([x1, x2]))
            lines.append(f"{x1!r},{x2!r},{G[0, 0]!r},{G[0, 1]!r},{G[1, 1]!r}")
    Path(path).write_text("\n".join(lines) + "\n")
    return path
