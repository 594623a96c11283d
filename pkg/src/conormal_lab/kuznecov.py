"""Exact spectral sums over model surfaces and their oscillation analysis.

For explicitly solvable models (flat tori, the round sphere) the weighted
eigenvalue count

    N(lam) = sum over lam_j <= lam of |integral of e_j over Sigma|^2

is computable in closed form: period integrals of the eigenbasis against a
closed geodesic, a point, or a latitude circle reduce to lattice
conditions or Legendre values.  This module enumerates those sums exactly,
fits the leading power law, and Fourier-analyzes the residual; the
residual's peak frequencies are the return times of geodesics normal to
the target set, which the dynamical scan recovers independently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import SearchError

__all__ = [
    "KuznecovSeries",
    "torus_series",
    "sphere_series",
    "fit_counting",
    "fit_leading",
    "FitResult",
    "oscillation_spectrum",
    "SpectrumResult",
    "individual_bound_check",
    "write_series_csv",
    "write_residual_csv",
    "write_peaks_json",
]


@dataclass
class KuznecovSeries:
    """Sorted eigenvalue/weight pairs for one model and target set.

    ``lam`` is nondecreasing, ``weight[j]`` the squared period integral of
    the j-th eigenfunction over the target set.  Modes whose period
    integral vanishes identically are omitted; they do not move the sums.
    """

    lam: np.ndarray
    weight: np.ndarray
    codim: int
    model: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.lam = np.asarray(self.lam, float)
        self.weight = np.asarray(self.weight, float)
        if self.lam.ndim != 1 or self.lam.shape != self.weight.shape:
            raise ValueError("lam and weight must be matching 1-d arrays")
        if self.lam.size and np.any(np.diff(self.lam) < 0):
            raise ValueError("eigenvalues must be nondecreasing")
        if np.any(self.weight < 0):
            raise ValueError("weights must be nonnegative")

    @property
    def lam_max(self) -> float:
        return float(self.lam[-1]) if self.lam.size else 0.0

    def counting(self, grid) -> np.ndarray:
        """Right-continuous weighted count N(lam) on an array of points."""
        grid = np.asarray(grid, float)
        cum = np.concatenate([[0.0], np.cumsum(self.weight)])
        return cum[np.searchsorted(self.lam, grid, side="right")]

    def truncated(self, lam_cap: float) -> "KuznecovSeries":
        keep = self.lam <= lam_cap
        return KuznecovSeries(self.lam[keep], self.weight[keep],
                              self.codim, self.model, dict(self.meta))


def _dual_lattice(periods, lambda_max):
    """Lattice covector norms |2 pi m / P| up to lambda_max, all of Z^2."""
    P1, P2 = periods
    # over-enumerate by one index so the lam <= lambda_max mask below is the
    # sole arbiter; floor of the rounded ratio can drop a boundary mode
    M1 = int(np.ceil(lambda_max * P1 / (2.0 * np.pi))) + 1
    M2 = int(np.ceil(lambda_max * P2 / (2.0 * np.pi))) + 1
    m1 = np.arange(-M1, M1 + 1)
    m2 = np.arange(-M2, M2 + 1)
    A, B = np.meshgrid(m1, m2, indexing="ij")
    # one rounding per axis: the dual step 2 pi / P is exact for P = 2 pi
    lam = np.hypot((2.0 * np.pi / P1) * A, (2.0 * np.pi / P2) * B)
    mask = lam <= lambda_max
    return A[mask], B[mask], lam[mask]


def torus_series(periods=(2.0 * np.pi, 2.0 * np.pi), sigma_spec="line",
                 lambda_max: float = 100.0) -> KuznecovSeries:
    """Exact weighted eigenvalue series on a rectangular flat torus.

    Eigenfunctions are the complex exponentials exp(i<2 pi m / P, x>)
    normalized in L^2; each lattice point is one entry, so eigenspace
    multiplicity is resolved mode by mode.  Supported target sets:

    - ``"line"`` or ``{"kind": "line", "level": c}``: the closed geodesic
      {x2 = c}.  Only m1 = 0 modes contribute and each carries the exact
      weight P1/P2 (1 on the square torus), independent of the level.
    - ``{"kind": "point"}``: a single point.  Every mode contributes
      weight 1/(P1 P2).

    Parameters
    ----------
    periods : pair of floats
        Side lengths (P1, P2) of the torus.
    sigma_spec : str or dict
        Target set specification as above.
    lambda_max : float
        Largest eigenvalue enumerated.

    Returns
    -------
    KuznecovSeries
        codim 1 for the line, codim 2 for the point.
    """
    P1, P2 = float(periods[0]), float(periods[1])
    if P1 <= 0 or P2 <= 0 or lambda_max <= 0:
        raise ValueError("periods and lambda_max must be positive")
    if isinstance(sigma_spec, str):
        sigma_spec = {"kind": sigma_spec}
    kind = sigma_spec.get("kind")
    if kind == "line":
        # |integral over {x2=c} of exp(i m2~ x2)/sqrt(P1 P2)|^2 = P1/P2,
        # one entry per m2; m1 != 0 modes integrate to zero along the line
        M2 = int(np.ceil(lambda_max * P2 / (2.0 * np.pi))) + 1
        m2 = np.arange(-M2, M2 + 1)
        lam = (2.0 * np.pi / P2) * np.abs(m2)
        keep = lam <= lambda_max
        m2, lam = m2[keep], lam[keep]
        w = np.full(m2.shape, P1 / P2)
        order = np.argsort(lam, kind="stable")
        return KuznecovSeries(lam[order], w[order], codim=1,
                              model="torus_line",
                              meta={"periods": (P1, P2), "basis": "complex",
                                    "level": float(sigma_spec.get("level", 0.0))})
    if kind == "point":
        # |e_j(x0)|^2 = 1/(P1 P2) for every mode, any base point
        _, _, lam = _dual_lattice((P1, P2), lambda_max)
        lam = np.sort(lam, kind="stable")
        w = np.full(lam.shape, 1.0 / (P1 * P2))
        return KuznecovSeries(lam, w, codim=2, model="torus_point",
                              meta={"periods": (P1, P2), "basis": "complex"})
    raise ValueError(f"unsupported sigma_spec {sigma_spec!r}")


def torus_line_weights_real_basis(periods, level, lambda_max: float):
    """(lam, weight) arrays for the line target in the real cos/sin basis.

    The per-mode weights differ from the complex enumeration, but their
    sum within each eigenspace agrees; pairing the two is the basis
    independence check for the weighted count.
    """
    P1, P2 = float(periods[0]), float(periods[1])
    M2 = int(np.floor(lambda_max * P2 / (2.0 * np.pi)))
    lam = [0.0]
    w = [P1 / P2]
    for m2 in range(1, M2 + 1):
        k = (2.0 * np.pi / P2) * m2
        # sqrt(2/(P1 P2)) cos(k x2), same with sin; integral over {x2 = c}
        lam.extend([k, k])
        w.extend([2.0 * (P1 / P2) * np.cos(k * level) ** 2,
                  2.0 * (P1 / P2) * np.sin(k * level) ** 2])
    lam = np.asarray(lam)
    order = np.argsort(lam, kind="stable")
    return lam[order], np.asarray(w)[order]


def _normalized_legendre(x: float, l_max: int) -> np.ndarray:
    """Values p_l(x) of the orthonormal Legendre system on [-1, 1].

    Upward recurrence in the normalized variable, stable for |x| <= 1 up
    to very large degree.
    """
    p = np.empty(l_max + 1)
    p[0] = 1.0 / np.sqrt(2.0)
    if l_max >= 1:
        p[1] = np.sqrt(1.5) * x
    for l in range(2, l_max + 1):
        a = np.sqrt((2.0 * l - 1.0) * (2.0 * l + 1.0)) / l
        b = (l - 1.0) * np.sqrt((2.0 * l + 1.0) / (2.0 * l - 3.0)) / l
        p[l] = a * x * p[l - 1] - b * p[l - 2]
    return p


def _azimuthal_symmetry_check(m_samples=(1, 2, 5), n_grid: int = 256,
                              tol: float = 1e-10) -> float:
    """Largest trapezoid integral of exp(i m phi) over the circle.

    The latitude-circle integral of a nonzonal harmonic carries this
    factor, constant along the circle otherwise, so its vanishing is what
    kills every m != 0 weight.
    """
    phi = np.linspace(0.0, 2.0 * np.pi, n_grid, endpoint=False)
    worst = 0.0
    for m in m_samples:
        val = np.abs(np.mean(np.exp(1j * m * phi)))
        worst = max(worst, float(val))
    if worst > tol:
        raise SearchError(f"azimuthal integrals fail to vanish: {worst:.3e}")
    return worst


def sphere_series(sigma_spec="equator", l_max: int = 200) -> KuznecovSeries:
    """Exact weighted eigenvalue series on the unit round sphere.

    Target sets are latitude circles u = u0 (``"equator"`` means u0 = 0).
    By rotational symmetry only the zonal harmonic of each degree has a
    nonzero circle integral (the azimuthal factor integrates to zero; a
    numerical spot check enforces this), so degree l contributes the
    single entry

        lam_l = sqrt(l (l + 1)),
        w_l   = 2 pi cos(u0)^2 p_l(sin u0)^2

    with p_l the orthonormal Legendre values.

    Parameters
    ----------
    sigma_spec : str or dict
        ``"equator"`` or ``{"kind": "latitude", "u0": value}`` with
        |u0| < pi/2.
    l_max : int
        Largest spherical-harmonic degree enumerated.

    Returns
    -------
    KuznecovSeries
        codim 1 series; ``meta["u0"]`` records the latitude.
    """
    if isinstance(sigma_spec, str):
        sigma_spec = {"kind": sigma_spec}
    kind = sigma_spec.get("kind")
    if kind == "equator":
        u0 = 0.0
    elif kind == "latitude":
        u0 = float(sigma_spec["u0"])
    else:
        raise ValueError(f"unsupported sigma_spec {sigma_spec!r}")
    if not abs(u0) < 0.5 * np.pi:
        raise ValueError("latitude must satisfy |u0| < pi/2")
    if l_max < 0:
        raise ValueError("l_max must be nonnegative")
    _azimuthal_symmetry_check()
    ls = np.arange(l_max + 1)
    lam = np.sqrt(ls * (ls + 1.0))
    p = _normalized_legendre(np.sin(u0), l_max)
    w = 2.0 * np.pi * np.cos(u0) ** 2 * p ** 2
    return KuznecovSeries(lam, w, codim=1, model="sphere_latitude",
                          meta={"u0": u0, "l_max": int(l_max)})


@dataclass
class FitResult:
    """Leading-order fit of a weighted counting function."""

    coefficient: float
    exponent: float
    intercept: float
    codim: int
    grid: np.ndarray
    residual: np.ndarray
    max_residual: float
    model: str
    meta: dict = field(default_factory=dict)


def fit_counting(grid, N, codim: int, model: str = "direct") -> FitResult:
    """Fit C lam^codim + intercept to counting values on a grid.

    The growth exponent is a least-squares slope of log N against
    log lam over the upper half of the grid; the coefficient and
    intercept come from a linear fit of N against lam^codim over the
    same window.  The residual

        r(lam) = (N(lam) - C lam^codim) / lam^(codim - 1)

    is returned on the full grid (the intercept is reported separately,
    not subtracted).
    """
    grid = np.asarray(grid, float)
    N = np.asarray(N, float)
    if grid.ndim != 1 or grid.shape != N.shape or grid.size < 8:
        raise ValueError("grid and N must be matching 1-d arrays")
    if np.all(N == 0):
        raise SearchError("degenerate fit: counting function is identically zero")
    upper = grid >= 0.5 * grid[-1]
    gu, Nu = grid[upper], N[upper]
    pos = Nu > 0
    slope, _ = np.polyfit(np.log(gu[pos]), np.log(Nu[pos]), 1)
    C, intercept = np.polyfit(gu ** codim, Nu, 1)
    safe = np.where(grid > 0, grid, 1.0)
    r = (N - C * grid ** codim) / safe ** (codim - 1)
    return FitResult(
        coefficient=float(C), exponent=float(slope),
        intercept=float(intercept), codim=int(codim), grid=grid,
        residual=r, max_residual=float(np.max(np.abs(r[upper]))),
        model=model, meta={"fit_window": (float(gu[0]), float(gu[-1]))})


def fit_leading(series: KuznecovSeries, grid_n: int = 8192,
                lam_min: float = 0.0, prefilter: int = 1,
                smooth: float = 0.0) -> FitResult:
    """Leading-order fit of a series' counting function.

    Samples N on a uniform grid over [lam_min, lam_max] and delegates to
    :func:`fit_counting`; the residual grid doubles as the input of
    :func:`oscillation_spectrum`.

    Point samples of a step function alias the slowly decaying jump
    harmonics into the analysis band, so two optional anti-alias modes
    exist.  ``prefilter`` = q > 1 replaces each grid value by the mean
    of q subsamples across its cell.  ``smooth`` = sigma > 0 Gaussian
    mollifies the count instead, damping the residual spectrum by the
    known factor exp(-t^2 sigma^2 / 2) which
    :func:`oscillation_spectrum` can divide back out.  The default
    (q = 1, sigma = 0) keeps the residual values exact.
    """
    if series.lam_max < 50.0:
        raise ValueError("series too short to fit: need lam_max >= 50")
    grid = np.linspace(lam_min, series.lam_max, grid_n)
    if smooth > 0.0:
        N = _mollified_counting(series, grid, smooth)
    elif prefilter > 1:
        h = (grid[1] - grid[0]) / prefilter
        offs = (np.arange(prefilter) - 0.5 * (prefilter - 1)) * h
        N = series.counting(grid[:, None] + offs[None, :]).mean(axis=1)
    else:
        N = series.counting(grid)
    out = fit_counting(grid, N, series.codim, model=series.model)
    out.meta.update(series.meta)
    out.meta["prefilter"] = int(prefilter)
    out.meta["smooth"] = float(smooth)
    return out


def _mollified_counting(series: KuznecovSeries, grid, sigma: float):
    """Gaussian-mollified count sum_j w_j Phi((lam - lam_j)/sigma).

    Computed as a discrete convolution of the step function on an exact
    q-fold refinement of the grid, so grid values are convolution nodes
    and no interpolation enters.  Mollification multiplies the residual
    spectrum by exp(-t^2 sigma^2 / 2), known and correctable, while
    jump harmonics beyond the band die before they can alias.
    """
    from scipy.special import ndtr

    n = grid.size
    d = float(grid[1] - grid[0])
    q = max(1, int(np.ceil(6.0 * d / sigma)))
    h = d / q
    kh = int(np.ceil(6.0 * sigma / h))
    fine = grid[0] + np.arange(-kh, (n - 1) * q + kh + 1) * h
    Nf = series.counting(fine)
    kw = np.exp(-0.5 * ((np.arange(-kh, kh + 1) * h) / sigma) ** 2)
    kw /= kw.sum()
    Ns = np.convolve(Nf, kw, mode="same")
    out = Ns[kh + q * np.arange(n)]
    # consistency spot check at one interior node: the sampled step
    # carries each jump at its node cell, a half-sample offset that only
    # rephases the spectrum, so compare against those positions exactly
    mid = float(fine[kh + q * (n // 2)])
    idx = np.searchsorted(fine, series.lam, side="left")
    lamq = fine[np.minimum(idx, fine.size - 1)] - 0.5 * h
    exact = float(ndtr((mid - lamq) / sigma) @ series.weight)
    if abs(out[n // 2] - exact) > 1e-6 * max(1.0, abs(exact)):
        raise SearchError("mollified counting discretization drifted")
    return out


@dataclass
class SpectrumResult:
    """Windowed Fourier spectrum of a counting residual."""

    times: np.ndarray
    amplitude: np.ndarray
    peaks: list
    resolution: float
    floor: float
    meta: dict = field(default_factory=dict)

    def peak_times(self) -> list:
        return [t for t, _ in self.peaks]


def oscillation_spectrum(grid, residual, horizon: float = 20.0,
                         t_min: float = 1.0, floor_factor: float = 5.0,
                         min_rel: float = 0.01, smooth: float = 0.0,
                         merge_dt: float | None = None) -> SpectrumResult:
    """Peak frequencies of a residual, in time units conjugate to lam.

    Hann-windowed real FFT of r on its uniform lam grid; a peak is a
    local maximum of the amplitude over (t_min, horizon] at least
    floor_factor times the median amplitude on that band and at least
    min_rel times the strongest band amplitude.  The relative condition
    matters because jump harmonics alias a power-law junk tail into the
    band whose largest members clear any median-based floor alone.
    Peaks closer together than merge_dt (default ten grid resolutions,
    about one window mainlobe) merge into the strongest, so window
    sidelobes do not register as lines.  Peak times match the return
    times of normal geodesics through the target set within the
    resolution 2 pi / span.

    Amplitudes are normalized so a pure sine of amplitude a produces a
    peak of height a; if the residual came from a Gaussian-mollified
    count, pass the same ``smooth`` so the damping exp(-t^2 sigma^2 / 2)
    is divided back out of the reported peak amplitudes.
    """
    grid = np.asarray(grid, float)
    residual = np.asarray(residual, float)
    if grid.size < 4096:
        raise ValueError("grid too short: need at least 4096 samples")
    d = np.diff(grid)
    if np.max(np.abs(d - d[0])) > 1e-9 * max(1.0, abs(d[0])):
        raise ValueError("grid must be uniform")
    n = grid.size
    # leftover linear drift from the coefficient fit leaks across the low
    # band through the window sidelobes; remove it before transforming
    detrended = residual - np.polyval(np.polyfit(grid, residual, 1), grid)
    win = np.hanning(n)
    F = np.fft.rfft(win * detrended)
    # unit-amplitude sine -> |F| = sum(win)/2 at its bin
    amp = np.abs(F) / (np.sum(win) / 2.0)
    freq = np.fft.rfftfreq(n, d=float(d[0]))
    times = 2.0 * np.pi * freq
    resolution = 2.0 * np.pi / (grid[-1] - grid[0])
    if merge_dt is None:
        merge_dt = 10.0 * resolution

    band = (times > t_min) & (times <= horizon)
    if not band.any():
        raise ValueError("horizon excludes every frequency bin")
    floor = max(floor_factor * float(np.median(amp[band])),
                min_rel * float(np.max(amp[band])))
    raw = []
    for k in np.nonzero(band)[0]:
        if k == 0 or k + 1 >= amp.size:
            continue
        if amp[k] >= amp[k - 1] and amp[k] > amp[k + 1] and amp[k] >= floor:
            raw.append((float(times[k]), float(amp[k])))
    peaks = []
    for t, a in sorted(raw, key=lambda p: -p[1]):
        if all(abs(t - tp) > merge_dt for tp, _ in peaks):
            peaks.append((t, a))
    if smooth > 0.0:
        peaks = [(t, a * np.exp(0.5 * (t * smooth) ** 2)) for t, a in peaks]
    peaks.sort()
    return SpectrumResult(
        times=times[band], amplitude=amp[band], peaks=peaks,
        resolution=float(resolution), floor=float(floor),
        meta={"horizon": float(horizon), "t_min": float(t_min),
              "floor_factor": float(floor_factor), "min_rel": float(min_rel),
              "n_grid": int(n), "merge_dt": float(merge_dt),
              "smooth": float(smooth)})


def individual_bound_check(series: KuznecovSeries,
                           lam_cap: float | None = None) -> dict:
    """Largest single weight against the power-law normalization.

    Returns max over lam_j >= 1 of w_j / lam_j^(codim - 1) together with
    the eigenvalue attaining it.  Calling with two caps shows the ratio
    is stable as the horizon grows.
    """
    s = series if lam_cap is None else series.truncated(lam_cap)
    mask = s.lam >= 1.0
    if not mask.any():
        return {"ratio": 0.0, "lam_at_max": None,
                "lam_max": s.lam_max, "n_entries": 0}
    lam, w = s.lam[mask], s.weight[mask]
    ratio = w / lam ** (series.codim - 1)
    j = int(np.argmax(ratio))
    return {"ratio": float(ratio[j]), "lam_at_max": float(lam[j]),
            "lam_max": s.lam_max, "n_entries": int(lam.size)}


def write_series_csv(series: KuznecovSeries, path) -> None:
    """Eigenvalue/weight table as two-column CSV."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("lam,weight\n")
        for lam, w in zip(series.lam, series.weight):
            fh.write(f"{lam!r},{w!r}\n")


def write_residual_csv(fit: FitResult, path) -> None:
    """Residual samples as two-column CSV."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("lam,residual\n")
        for lam, r in zip(fit.grid, fit.residual):
            fh.write(f"{lam!r},{r!r}\n")


def write_peaks_json(spectrum: SpectrumResult, path) -> None:
    """Spectrum peaks and floor data as deterministic JSON."""
    payload = {
        "floor": spectrum.floor,
        "peaks": [{"amplitude": a, "t": t} for t, a in spectrum.peaks],
        "resolution": spectrum.resolution,
    }
    payload.update({k: spectrum.meta[k] for k in sorted(spectrum.meta)})
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
