"""Precomputed half-space SG mass table f_h(theta, lambda).

theta is the signed spherical distance from the occlusion boundary to the lobe
axis (+pi/2 = lobe-centered hemisphere fully visible, -pi/2 fully hidden);
lambda is the lobe sharpness.  Entries are quadrature-exact to ~1e-6 relative;
lookups are bilinear in (theta, log lambda) with edge clamping.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .quadrature import gl_panels


def _edges_both_ends(a, b, halvings=16):
    """Panel edges on [a, b] geometrically clustered toward both endpoints."""
    if b - a < 1e-15:
        return np.array([a, b])
    k = 2.0 ** -np.arange(1, halvings + 1)
    return np.unique(np.concatenate([[a, b], a + (b - a) * k, b - (b - a) * k]))


def _halfspace_row(theta, lams):
    """f_h(theta, lam) for all lams at once (shared kink-aware node set).

    The ring fraction has sqrt-type kinks at u = +-cos(theta); both are panel
    edges, with geometric refinement toward every segment endpoint so sharp
    lobes (boundary layers near u = 1) and the kinks are resolved.  theta and
    -theta share the node set, so the pair identity
    f(theta) + f(-theta) = full-sphere mass holds to quadrature precision.
    """
    st, ct = np.sin(theta), np.cos(theta)
    kink = min(abs(ct), 1.0)
    segs = [(-1.0, -kink), (-kink, kink), (kink, 1.0)]
    edges = np.unique(np.concatenate([_edges_both_ends(a, b) for a, b in segs if b > a]))
    u, w = gl_panels(edges, 12)
    s = np.sqrt(np.maximum(1e-300, 1.0 - u * u))
    if ct > 1e-15:
        c0 = -u * st / np.maximum(s * ct, 1e-300)
    else:
        c0 = np.where(u * st > 0.0, -np.inf, np.inf)
    frac = np.arccos(np.clip(c0, -1.0, 1.0))
    lams = np.asarray(lams, dtype=np.float64)
    g = np.exp(lams[None, :] * (u[:, None] - 1.0))
    return 2.0 * ((w * frac) @ g)


@dataclass
class FhTable:
    thetas: np.ndarray   # (nt,), uniform in [-pi/2, pi/2]
    lambdas: np.ndarray  # (nl,), log-spaced
    values: np.ndarray   # (nt, nl)

    def __post_init__(self):
        # bilinear interpolation runs on log values: f_h decays exponentially
        # in theta behind the boundary, where linear-space blending would lose
        # all relative accuracy
        self._logv = np.log(np.maximum(self.values, 1e-300))
        self._loglam = np.log(self.lambdas)

    def lookup(self, theta, lam):
        """Log-bilinear in (theta, log lambda); inputs clamp to the table edges."""
        th = np.clip(np.asarray(theta, dtype=np.float64), self.thetas[0], self.thetas[-1])
        ll = np.log(np.clip(np.asarray(lam, dtype=np.float64), self.lambdas[0], self.lambdas[-1]))
        ft = (th - self.thetas[0]) / (self.thetas[1] - self.thetas[0])
        fl = (ll - self._loglam[0]) / (self._loglam[1] - self._loglam[0])
        it = np.clip(ft.astype(np.int64), 0, len(self.thetas) - 2)
        il = np.clip(fl.astype(np.int64), 0, len(self.lambdas) - 2)
        tt = np.clip(ft - it, 0.0, 1.0)
        tl = np.clip(fl - il, 0.0, 1.0)
        v = self._logv
        out = np.exp(
            v[it, il] * (1 - tt) * (1 - tl)
            + v[it + 1, il] * tt * (1 - tl)
            + v[it, il + 1] * (1 - tt) * tl
            + v[it + 1, il + 1] * tt * tl
        )
        return np.where(out < 1e-290, 0.0, out)

    def save(self, path):
        with open(path, "wb") as f:
            f.write(b"FHT1")
            f.write(struct.pack("<II", len(self.thetas), len(self.lambdas)))
            f.write(self.thetas.astype("<f8").tobytes())
            f.write(self.lambdas.astype("<f8").tobytes())
            f.write(self.values.astype("<f8").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            if f.read(4) != b"FHT1":
                raise ValueError(f"{path!r} is not an FHT1 table file")
            nt, nl = struct.unpack("<II", f.read(8))
            thetas = np.frombuffer(f.read(8 * nt), dtype="<f8").copy()
            lambdas = np.frombuffer(f.read(8 * nl), dtype="<f8").copy()
            values = np.frombuffer(f.read(8 * nt * nl), dtype="<f8").reshape(nt, nl).copy()
        return cls(thetas, lambdas, values)


def build_fh(theta_res=1024, lambda_res=160, lambda_range=(0.5, 5000.0)):
    """Quadrature-built f_h table; monotone in theta by construction."""
    if theta_res < 16 or lambda_res < 16:
        raise ValueError("table resolutions must be >= 16")
    thetas = np.linspace(-np.pi / 2, np.pi / 2, theta_res)
    lambdas = np.exp(np.linspace(np.log(lambda_range[0]), np.log(lambda_range[1]), lambda_res))
    values = np.stack([_halfspace_row(t, lambdas) for t in thetas])
    # quadrature noise is ~1e-12 relative; pin the exact monotonicity invariant
    values = np.maximum.accumulate(values, axis=0)
    return FhTable(thetas, lambdas, values)


_DEFAULT_FH = None


def default_fh():
    global _DEFAULT_FH
    if _DEFAULT_FH is None:
        _DEFAULT_FH = build_fh()
    return _DEFAULT_FH
