"""1D ring-reduced integrals of spherical Gaussians against half-spaces and cosines.

Both reductions integrate over rings of constant u = d.p (p = lobe axis).  On a
ring, the geometric factor has a closed form, leaving a 1D integral in u that
composite Gauss-Legendre panels handle to ~1e-6 relative even at lambda = 5000
(panels are packed geometrically toward u = 1 where sharp lobes concentrate).
"""

from __future__ import annotations

import numpy as np
from numpy.polynomial.legendre import leggauss


def gl_panels(edges, nodes_per_panel=24):
    """Composite Gauss-Legendre nodes/weights over consecutive [edges] panels."""
    xs, ws = leggauss(nodes_per_panel)
    lo = edges[:-1][:, None]
    hi = edges[1:][:, None]
    u = 0.5 * (hi - lo) * xs[None, :] + 0.5 * (hi + lo)
    w = 0.5 * (hi - lo) * np.broadcast_to(ws[None, :], u.shape)
    return u.ravel(), w.ravel()


def _sharp_edges(lo, hi, lam, n_panels):
    """Panel edges on [lo, hi], geometrically refined toward hi for sharp lobes."""
    if hi >= 1.0 - 1e-12 and lam > 30.0:
        u0 = max(lo, 1.0 - 30.0 / lam)
        coarse = np.linspace(lo, u0, 4) if u0 > lo else np.array([lo])
        fine = 1.0 - (1.0 - u0) * np.linspace(1.0, 0.0, n_panels) ** 2
        return np.unique(np.concatenate([coarse, fine]))
    return np.linspace(lo, hi, n_panels + 1)


def sg_halfspace_integral(theta, lam, n_panels=24, nodes=24):
    """Integral of exp(lam*(d.p-1)) over the half-space {d.b >= 0}.

    theta is the signed angle from the boundary to the lobe axis:
    angle(b, p) = pi/2 - theta, so theta = +pi/2 puts the whole lobe-centered
    hemisphere inside, theta = -pi/2 excludes it.
    """
    theta = float(np.clip(theta, -np.pi / 2, np.pi / 2))
    lam = float(lam)
    st, ct = np.sin(theta), np.cos(theta)
    kink = abs(ct)
    cuts = sorted({-1.0, -kink, kink, 1.0})
    total = 0.0
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        if hi - lo < 1e-15:
            continue
        u, w = gl_panels(_sharp_edges(lo, hi, lam, n_panels), nodes)
        s = np.sqrt(np.maximum(1e-300, 1.0 - u * u))
        c0 = np.where(ct > 0.0, -u * st / np.maximum(s * ct, 1e-300), np.where(u * st > 0.0, -np.inf, np.inf))
        frac = np.arccos(np.clip(c0, -1.0, 1.0))
        total += 2.0 * np.sum(w * np.exp(lam * (u - 1.0)) * frac)
    return total


def _ring_cosine(u, cosb, sinb):
    """Closed-form ring integral of max(d.n, 0) at fixed u = d.p."""
    A = u * cosb
    B = np.sqrt(np.maximum(0.0, 1.0 - u * u)) * sinb
    full = A >= B
    out = np.where(full, 2.0 * np.pi * A, 0.0)
    mid = np.abs(A) < B
    if np.any(mid):
        z0 = np.arccos(np.clip(-A[mid] / np.maximum(B[mid], 1e-300), -1.0, 1.0))
        out = out.copy()
        out[mid] = 2.0 * (A[mid] * z0 + B[mid] * np.sin(z0))
    return out


def sg_cosine_integral(cosb, lam, n_panels=24, nodes=24):
    """Integral of exp(lam*(d.p-1)) * max(d.n, 0) over the sphere; cosb = p.n."""
    cosb = float(np.clip(cosb, -1.0, 1.0))
    lam = float(lam)
    sinb = np.sqrt(max(0.0, 1.0 - cosb * cosb))
    u, w = gl_panels(_sharp_edges(-1.0, 1.0, lam, n_panels), nodes)
    return float(np.sum(w * np.exp(lam * (u - 1.0)) * _ring_cosine(u, cosb, sinb)))


def sg_cosine_integral_many(cosb, lam, n_panels=32, nodes=24):
    """Vectorized sg_cosine_integral over a cosb grid at one lambda."""
    cosb = np.asarray(cosb, dtype=np.float64)
    sinb = np.sqrt(np.maximum(0.0, 1.0 - cosb * cosb))
    u, w = gl_panels(_sharp_edges(-1.0, 1.0, float(lam), n_panels), nodes)
    A = u[None, :] * cosb[:, None]
    B = np.sqrt(np.maximum(0.0, 1.0 - u * u))[None, :] * sinb[:, None]
    ring = np.where(A >= B, 2.0 * np.pi * A, 0.0)
    mid = np.abs(A) < B
    z0 = np.arccos(np.clip(np.where(mid, -A / np.maximum(B, 1e-300), 0.0), -1.0, 1.0))
    ring = np.where(mid, 2.0 * (A * z0 + B * np.sin(z0)), ring)
    g = w * np.exp(lam * (u - 1.0))
    return ring @ g
