"""Dense voxel radiance field: storage, ray marching, surfaces, test scenes.

The field holds per-voxel extinction sigma (1/m) and view-independent HDR
emission; rays accumulate transmittance-weighted color/opacity/depth with
fixed-step midpoint sampling (last interval truncated at the range end, so
extending a range never decreases opacity).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .kernels.pykernels import _trilerp


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray  # unit

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-6:
            raise ValueError("ray direction must be unit length")
        self.direction = d / n


@dataclass
class MarchResult:
    color: np.ndarray        # transmittance-weighted RGB sum
    opacity: float           # 1 - final transmittance, in [0,1]
    depth_raw: float         # sum T alpha t (underestimates for thin media)
    depth: float             # depth_raw / opacity above threshold, else t_far
    t_far: float
    n_steps: int


@dataclass
class StepConfig:
    samples_per_diag: float = 2.0     # samples per voxel diagonal
    step: float | None = None         # explicit world-space step overrides
    max_steps: int = 1_000_000
    depth_opacity_floor: float = 0.05

    def step_for(self, field):
        if self.step is not None:
            return float(self.step)
        return float(field.voxel_diag / self.samples_per_diag)


class VoxelRadianceField:
    def __init__(self, density, emission, bbox_min, bbox_max):
        self.density = np.ascontiguousarray(density, dtype=np.float64)
        self.emission = np.ascontiguousarray(emission, dtype=np.float64)
        if self.density.ndim != 3 or self.emission.shape != self.density.shape + (3,):
            raise ValueError("density must be (Nz,Ny,Nx), emission (Nz,Ny,Nx,3)")
        if np.any(self.density < 0) or np.any(self.emission < 0):
            raise ValueError("density and emission must be non-negative")
        self.bbox_min = np.asarray(bbox_min, dtype=np.float64).reshape(3)
        self.bbox_max = np.asarray(bbox_max, dtype=np.float64).reshape(3)
        if not np.all(self.bbox_min < self.bbox_max):
            raise ValueError("bbox min must be below max componentwise")
        nz, ny, nx = self.density.shape
        self.dims = (nx, ny, nz)
        self.cell = (self.bbox_max - self.bbox_min) / np.array([nx, ny, nz])
        self.voxel_diag = float(np.linalg.norm(self.cell))

    @property
    def center(self):
        return 0.5 * (self.bbox_min + self.bbox_max)

    @property
    def extent(self):
        return self.bbox_max - self.bbox_min

    def sample_density(self, points):
        p = np.asarray(points, dtype=np.float64)
        g = (p - self.bbox_min) / self.cell - 0.5
        return _trilerp(self.density, g[..., 0], g[..., 1], g[..., 2])

    def contains_points(self, points):
        p = np.asarray(points, dtype=np.float64)
        return np.all((p >= self.bbox_min) & (p <= self.bbox_max), axis=-1)


def intersect_bounds(field, ray):
    """Slab test against the field bbox -> (t_near, t_far) or None.

    t_near is clamped to 0 for interior origins; misses (including rays whose
    whole overlap is behind the origin) return None.
    """
    o, d = ray.origin, ray.direction
    with np.errstate(divide="ignore"):
        inv = np.where(np.abs(d) > 1e-300, 1.0 / d, np.inf)
    ta = (field.bbox_min - o) * inv
    tb = (field.bbox_max - o) * inv
    # rays parallel to a slab outside it never intersect
    par = np.abs(d) <= 1e-300
    if np.any(par & ((o < field.bbox_min) | (o > field.bbox_max))):
        return None
    lo = np.where(par, -np.inf, np.minimum(ta, tb))
    hi = np.where(par, np.inf, np.maximum(ta, tb))
    t_n = float(np.max(lo))
    t_f = float(np.min(hi))
    if t_n > t_f or t_f <= 0.0:
        return None
    return max(t_n, 0.0), t_f


def intersect_bounds_batch(field, origins, dirs):
    """Vectorized slab test: (t_near (N,), t_far (N,), hit mask (N,))."""
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(np.abs(d) > 1e-300, 1.0 / d, np.inf)
        ta = (field.bbox_min - o) * inv
        tb = (field.bbox_max - o) * inv
    par = np.abs(d) <= 1e-300
    inside = (o >= field.bbox_min) & (o <= field.bbox_max)
    lo = np.where(par, np.where(inside, -np.inf, np.inf), np.minimum(ta, tb))
    hi = np.where(par, np.where(inside, np.inf, -np.inf), np.maximum(ta, tb))
    t_n = lo.max(axis=-1)
    t_f = hi.min(axis=-1)
    ok = (t_n <= t_f) & (t_f > 0.0)
    return np.maximum(t_n, 0.0), t_f, ok


def march(field, ray, t_range=None, step=None):
    """March one ray over t_range (defaults to the bbox overlap)."""
    cfg = step if isinstance(step, StepConfig) else StepConfig(step=step)
    if t_range is None:
        hit = intersect_bounds(field, ray)
        t_range = hit if hit is not None else (0.0, 0.0)
    t_a, t_b = float(t_range[0]), float(t_range[1])
    if t_a > t_b:
        raise ValueError("march range must satisfy t_a <= t_b")
    color, opacity, depth_raw, depth, n_steps = march_batch(
        field, ray.origin[None, :], ray.direction[None, :],
        np.array([t_a]), np.array([t_b]), cfg,
    )
    return MarchResult(color[0], float(opacity[0]), float(depth_raw[0]),
                       float(depth[0]), t_b, int(n_steps[0]))


def march_batch(field, origins, dirs, t0, t1, cfg=None):
    """Vectorized march: (color (N,3), opacity, depth_raw, depth_norm, n_steps)."""
    cfg = cfg or StepConfig()
    h = cfg.step_for(field)
    t0 = np.asarray(t0, dtype=np.float64)
    t1 = np.asarray(t1, dtype=np.float64)
    color, opacity, depth_raw = kernels.march_rays(
        field.density, field.emission, field.bbox_min, field.cell,
        origins, dirs, t0, np.maximum(t1, t0), h, cfg.max_steps,
    )
    safe = opacity > cfg.depth_opacity_floor
    depth = np.where(safe, depth_raw / np.where(safe, opacity, 1.0), t1)
    n_steps = np.maximum(np.ceil((t1 - t0) / h - 1e-12), 0.0).astype(np.int64)
    return color, opacity, depth_raw, depth, np.minimum(n_steps, cfg.max_steps)


def density_gradient(field, x):
    """Central differences at one-voxel spacing; x must lie inside the bbox."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(field.contains_points(x)):
        raise ValueError("density_gradient point outside field bbox")
    return _gradient_batch(field, x.reshape(-1, 3)).reshape(x.shape)


def _gradient_batch(field, pts):
    grad = np.empty_like(pts)
    for a in range(3):
        h = field.cell[a]
        dp = np.zeros(3)
        dp[a] = h
        grad[:, a] = (field.sample_density(pts + dp) - field.sample_density(pts - dp)) / (2 * h)
    return grad


def surface_sample(field, ray, cfg=None, opacity_threshold=0.5):
    """Surface point + density-gradient normal, or None below the opacity bar.

    Returns (x_surf, normal, flagged) where flagged marks a zero-gradient
    fallback normal (-ray direction).
    """
    cfg = cfg or StepConfig()
    hit = intersect_bounds(field, ray)
    if hit is None:
        return None
    res = march(field, ray, hit, cfg)
    if res.opacity < opacity_threshold:
        return None
    x = ray.origin + ray.direction * res.depth
    x = np.clip(x, field.bbox_min + 1e-9, field.bbox_max - 1e-9)
    g = density_gradient(field, x)
    norm = np.linalg.norm(g)
    if norm < 1e-12:
        return x, -ray.direction, True
    return x, -g / norm, False


# ---------------------------------------------------------------------------
# Procedural scenes (deterministic, desk scale: bbox [-1,1]^3 meters, z up)


SCENE_IDS = ("box_room", "open_room", "floor_plane")


def gen_procedural(scene_id, resolution=64):
    """Deterministic test fields.

    box_room: closed room, emissive ceiling panel + dim gray walls (all light
    internal).  open_room: +x wall removed so external light must be explained
    by the environment.  floor_plane: a single dense slab shadow receiver.
    """
    if scene_id not in SCENE_IDS:
        raise ValueError(f"unknown scene id {scene_id!r}; known: {SCENE_IDS}")
    n = int(resolution)
    if n < 8:
        raise ValueError("resolution must be >= 8")
    bmin = np.array([-1.0, -1.0, -1.0])
    bmax = np.array([1.0, 1.0, 1.0])
    density = np.zeros((n, n, n))
    emission = np.zeros((n, n, n, 3))
    c = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    zz, yy, xx = np.meshgrid(c, c, c, indexing="ij")

    wall_sigma = 600.0
    thick = 3.0 * 2.0 / n  # three voxels: corner-clipping rays stay opaque

    # emission is painted over regions wider than the density support so the
    # density taper (trilinear boundary) sees the surface color, not black
    if scene_id in ("box_room", "open_room"):
        walls = (
            (xx < bmin[0] + thick) | (yy < bmin[1] + thick) | (zz < bmin[2] + thick)
            | (xx > bmax[0] - thick) | (yy > bmax[1] - thick) | (zz > bmax[2] - thick)
        )
        if scene_id == "open_room":
            walls &= ~(xx > bmax[0] - thick)
        density[walls] = wall_sigma
        emission[...] = np.array([0.25, 0.25, 0.25])
        panel = (zz > bmax[2] - 3 * thick) & (np.abs(xx) < 0.5) & (np.abs(yy) < 0.5)
        emission[panel] = np.array([2.0, 1.9, 1.7])
        floor = zz < bmin[2] + 3 * thick
        emission[floor] = np.array([0.35, 0.33, 0.30])
    else:  # floor_plane
        slab = zz < -0.8
        density[slab] = wall_sigma
        emission[...] = np.array([0.5, 0.5, 0.5])

    return VoxelRadianceField(density, emission, bmin, bmax)


# ---------------------------------------------------------------------------
# Binary field file: magic VRF1, u32 dims, f32 bbox, f32 densities, f32 RGB
# emissions; linear index (z*Ny + y)*Nx + x.


def save_field(field, path):
    nx, ny, nz = field.dims
    with open(path, "wb") as f:
        f.write(b"VRF1")
        f.write(struct.pack("<III", nx, ny, nz))
        f.write(struct.pack("<6f", *field.bbox_min, *field.bbox_max))
        f.write(field.density.astype("<f4").tobytes())
        f.write(field.emission.astype("<f4").tobytes())


def load_field(path):
    with open(path, "rb") as f:
        if f.read(4) != b"VRF1":
            raise ValueError(f"{path!r} is not a VRF1 field file")
        nx, ny, nz = struct.unpack("<III", f.read(12))
        bbox = struct.unpack("<6f", f.read(24))
        count = nx * ny * nz
        density = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(nz, ny, nx)
        emission = np.frombuffer(f.read(12 * count), dtype="<f4").reshape(nz, ny, nx, 3)
    return VoxelRadianceField(
        density.astype(np.float64), emission.astype(np.float64), bbox[:3], bbox[3:]
    )
