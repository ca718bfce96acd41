"""Direction-space helpers: unit vectors, octahedral maps, sphere sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

UNIT_TOL = 1e-6


def normalize(v):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(n, 1e-300)


def check_unit(v, name="direction"):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1)
    if not np.all(np.abs(n - 1.0) <= UNIT_TOL):
        raise ValueError(f"{name} must be unit length (|norm-1| <= {UNIT_TOL})")
    return v


def reflect(d, n):
    """Mirror d about n: d - 2(d.n)n. Both unit."""
    d = np.asarray(d, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return d - 2.0 * np.sum(d * n, axis=-1, keepdims=True) * n


def orthonormal_basis(n):
    """Tangent/bitangent for unit n (branchless Frisvad-style)."""
    n = np.asarray(n, dtype=np.float64)
    s = np.where(n[..., 2] >= 0.0, 1.0, -1.0)
    a = -1.0 / (s + n[..., 2])
    b = n[..., 0] * n[..., 1] * a
    t1 = np.stack([1.0 + s * n[..., 0] ** 2 * a, s * b, -s * n[..., 0]], axis=-1)
    t2 = np.stack([b, s + n[..., 1] ** 2 * a, -n[..., 1]], axis=-1)
    return t1, t2


def angle_between(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = np.clip(np.sum(a * b, axis=-1), -1.0, 1.0)
    return np.arccos(d)


def fibonacci_sphere(n):
    """n near-uniform unit directions (deterministic)."""
    i = np.arange(n, dtype=np.float64)
    golden = np.pi * (3.0 - np.sqrt(5.0))
    z = 1.0 - 2.0 * i / max(n - 1, 1)
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    th = golden * i
    return np.stack([np.cos(th) * r, np.sin(th) * r, z], axis=-1)


def cosine_sample_hemisphere(n, u1, u2):
    """Cosine-weighted directions about unit normal n; pdf = cos/pi."""
    r = np.sqrt(u1)
    phi = 2.0 * np.pi * u2
    local = np.stack(
        [r * np.cos(phi), r * np.sin(phi), np.sqrt(np.maximum(0.0, 1.0 - u1))], axis=-1
    )
    t1, t2 = orthonormal_basis(n)
    return (
        local[..., 0:1] * t1 + local[..., 1:2] * t2 + local[..., 2:3] * np.asarray(n)
    )


# ---------------------------------------------------------------------------
# Octahedral direction map


def _sign_not_zero(x):
    return np.where(x >= 0.0, 1.0, -1.0)


def octa_encode(d):
    """Unit directions -> uv in [-1,1]^2 (full-sphere octahedral map)."""
    d = np.asarray(d, dtype=np.float64)
    an = np.sum(np.abs(d), axis=-1, keepdims=True)
    p = d / np.maximum(an, 1e-300)
    u, v, z = p[..., 0], p[..., 1], p[..., 2]
    lo = z < 0.0
    uu = np.where(lo, (1.0 - np.abs(v)) * _sign_not_zero(u), u)
    vv = np.where(lo, (1.0 - np.abs(u)) * _sign_not_zero(v), v)
    return np.stack([uu, vv], axis=-1)


def octa_decode(uv):
    """uv in [-1,1]^2 -> unit directions."""
    uv = np.asarray(uv, dtype=np.float64)
    u, v = uv[..., 0], uv[..., 1]
    z = 1.0 - np.abs(u) - np.abs(v)
    lo = z < 0.0
    uu = np.where(lo, (1.0 - np.abs(v)) * _sign_not_zero(u), u)
    vv = np.where(lo, (1.0 - np.abs(u)) * _sign_not_zero(v), v)
    d = np.stack([uu, vv, z], axis=-1)
    return normalize(d)


def octa_texel_of(d, res):
    """Texel index (i, j) containing each direction; i indexes u, j indexes v."""
    uv = octa_encode(d)
    ij = np.clip(((uv + 1.0) * 0.5 * res).astype(np.int64), 0, res - 1)
    return ij[..., 0], ij[..., 1]


def octa_texel_centers(res):
    """(res, res, 3) unit directions at texel centers."""
    c = (np.arange(res, dtype=np.float64) + 0.5) / res * 2.0 - 1.0
    u, v = np.meshgrid(c, c, indexing="ij")
    return octa_decode(np.stack([u, v], axis=-1))


def octa_flat_index(d, res):
    i, j = octa_texel_of(d, res)
    return i * res + j


def _spherical_triangle_area(a, b, c):
    # Van Oosterom & Strackee
    num = np.abs(np.sum(a * np.cross(b, c), axis=-1))
    den = (
        1.0
        + np.sum(a * b, axis=-1)
        + np.sum(b * c, axis=-1)
        + np.sum(a * c, axis=-1)
    )
    return 2.0 * np.arctan2(num, den)


def octa_solid_angles(res):
    """(res, res) solid angle per texel, normalized to sum to 4*pi."""
    e = np.arange(res + 1, dtype=np.float64) / res * 2.0 - 1.0
    u, v = np.meshgrid(e, e, indexing="ij")
    corners = octa_decode(np.stack([u, v], axis=-1))
    a = corners[:-1, :-1]
    b = corners[1:, :-1]
    c = corners[1:, 1:]
    d = corners[:-1, 1:]
    area = _spherical_triangle_area(a, b, c) + _spherical_triangle_area(a, c, d)
    return area * (4.0 * np.pi / area.sum())


@dataclass
class DirectionMap:
    """Scalar (or RGB) samples over the sphere on an octahedral res x res grid.

    values has shape (res, res) or (res, res, 3); texel (i, j) covers the uv
    cell [(i/res)*2-1, ((i+1)/res)*2-1) x [...), direction at the cell center.
    """

    res: int
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape[:2] != (self.res, self.res):
            raise ValueError("values grid does not match res")

    @classmethod
    def zeros(cls, res, channels=0):
        shape = (res, res) if channels == 0 else (res, res, channels)
        return cls(res, np.zeros(shape))

    @classmethod
    def filled(cls, res, value):
        return cls(res, np.full((res, res), float(value)))

    def directions(self):
        return octa_texel_centers(self.res)

    def solid_angles(self):
        return octa_solid_angles(self.res)

    def lookup(self, d):
        """Nearest-texel lookup for unit directions d (any leading shape)."""
        i, j = octa_texel_of(d, self.res)
        return self.values[i, j]
