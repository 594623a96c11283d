"""Small numeric helpers used throughout the library.

Nothing here knows about charts or flows; keep it that way so the helpers
stay testable in isolation.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "wrap_periodic",
    "periodic_delta",
    "mollifier",
    "mollifier_d1",
    "poly_bump",
    "poly_bump_d1",
    "gauss_legendre_quad",
    "fd_jacobian",
    "cstep_jacobian",
    "smoothstep",
    "smoothstep_d1",
]


def wrap_periodic(x, periods):
    """Reduce coordinates into [0, period) along periodic directions.

    ``periods`` is a sequence with one entry per coordinate; ``None`` marks a
    non-periodic direction, which is passed through unchanged.
    """
    x = np.array(x, dtype=float, copy=True)
    for i, p in enumerate(periods):
        if p is not None:
            x[..., i] = np.mod(x[..., i], p)
    return x


def periodic_delta(a, b, periods):
    """Shortest representative of a - b, component-wise, honoring periods."""
    d = np.asarray(a, float) - np.asarray(b, float)
    d = np.array(d, copy=True)
    for i, p in enumerate(periods):
        if p is not None:
            d[..., i] = (d[..., i] + 0.5 * p) % p - 0.5 * p
    return d


def mollifier(z):
    """Standard bump exp(-1/(1-z^2)) on (-1, 1), zero outside, vectorized.

    Normalized so the peak value is 1 (the exp(1) factor).
    """
    z = np.asarray(z, float)
    out = np.zeros_like(z)
    inside = np.abs(z) < 1.0
    zi = z[inside]
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - zi * zi))
    return out


def mollifier_d1(z):
    """Derivative of :func:`mollifier` with respect to z."""
    z = np.asarray(z, float)
    out = np.zeros_like(z)
    inside = np.abs(z) < 1.0
    zi = z[inside]
    w = 1.0 - zi * zi
    out[inside] = np.exp(1.0 - 1.0 / w) * (-2.0 * zi / (w * w))
    return out


def poly_bump(z, power=4):
    """Polynomial bump (1 - z^2)^power on (-1, 1), zero outside, vectorized.

    Being a polynomial on its support, fixed-order Gauss-Legendre rules
    integrate it exactly; the edges join with power - 1 continuous
    derivatives.
    """
    z = np.asarray(z, float)
    w = 1.0 - z * z
    return np.where(np.abs(z) < 1.0, w ** power, 0.0)


def poly_bump_d1(z, power=4):
    """Derivative of :func:`poly_bump` with respect to z."""
    z = np.asarray(z, float)
    w = 1.0 - z * z
    return np.where(np.abs(z) < 1.0, -2.0 * power * z * w ** (power - 1), 0.0)


def gauss_legendre_quad(f, a, b, order=64):
    """Integrate f over [a, b] with a fixed-order Gauss-Legendre rule."""
    nodes, weights = np.polynomial.legendre.leggauss(order)
    mid = 0.5 * (a + b)
    half = 0.5 * (b - a)
    return half * np.sum(weights * np.asarray(f(mid + half * nodes), float))


def fd_jacobian(f, x, h=1e-6):
    """Central-difference Jacobian of a vector map at x.

    ``h`` may be a scalar or a per-component array of steps.
    """
    x = np.asarray(x, float)
    h = np.broadcast_to(np.asarray(h, float), x.shape)
    f0 = np.asarray(f(x), float)
    jac = np.empty(f0.shape + x.shape, float)
    for idx in np.ndindex(x.shape):
        dx = np.zeros_like(x)
        dx[idx] = h[idx]
        jac[(...,) + idx] = (np.asarray(f(x + dx), float)
                             - np.asarray(f(x - dx), float)) / (2.0 * h[idx])
    return jac


def cstep_jacobian(f, x, h=1e-30):
    """Complex-step Jacobian of a real-analytic vector map at x.

    ``f`` must accept complex input arrays and propagate small imaginary
    parts through analytically (use the helpers in :mod:`flow` for trig
    inverses).  Exact to machine precision, no subtractive cancellation.
    """
    x = np.asarray(x, float)
    f0 = np.asarray(f(x.astype(complex)), complex)
    jac = np.empty(f0.shape + x.shape, float)
    for idx in np.ndindex(x.shape):
        dx = np.zeros(x.shape, complex)
        dx[idx] = 1j * h
        jac[(...,) + idx] = np.imag(np.asarray(f(x + dx), complex)) / h
    return jac


def smoothstep(t):
    """C-infinity step: 0 for t <= 0, 1 for t >= 1, strictly monotone between."""
    t = np.asarray(t, float)
    lo = np.where(t > 0.0, np.exp(-1.0 / np.maximum(t, 1e-300)), 0.0)
    hi = np.where(t < 1.0, np.exp(-1.0 / np.maximum(1.0 - t, 1e-300)), 0.0)
    out = lo / (lo + hi)
    return out if out.ndim else float(out)


def smoothstep_d1(t, h=1e-6):
    """Derivative of smoothstep by central differences (plateaus are exact)."""
    t = np.asarray(t, float)
    out = (smoothstep(t + h) - smoothstep(t - h)) / (2.0 * h)
    out = np.where((t <= 0.0) | (t >= 1.0), 0.0, out)
    return out if out.ndim else float(out)
