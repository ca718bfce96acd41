"""Runtime insertion pipeline: incident lighting at the object center, warm-
started SG fitting, object shading with per-lobe self-shadow factors,
occlusion-aware compositing, and shadow attenuation on the background.
"""

from __future__ import annotations

import struct
import time
import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np

from .camera import Camera
from .field import StepConfig, _gradient_batch, intersect_bounds_batch, march_batch
from .fh import FhTable, default_fh
from .geom import normalize, octa_decode, octa_solid_angles, octa_texel_centers
from .images import encode_png, pfm_bytes, tonemap, to_uint8
from .mesh import TriangleMesh
from .sg import SGMixture, BRDFParams, cosine_lobe, shade_points_batch
from .sgfit import FitBudget, cold_start_mixture, fit_mixture
from .shadowfield import SSDFField, query_ssd_batch


@dataclass
class VirtualObject:
    mesh: TriangleMesh
    brdf: BRDFParams = dc_field(default_factory=BRDFParams)
    rotation: np.ndarray = dc_field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = dc_field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.scale <= 0:
            raise ValueError("object scale must be positive")
        if abs(abs(np.linalg.det(self.rotation)) - 1.0) > 1e-6:
            raise ValueError("rotation must be orthonormal")
        self._world = None

    def set_transform(self, rotation=None, translation=None, scale=None):
        if rotation is not None:
            self.rotation = np.asarray(rotation, dtype=np.float64).reshape(3, 3)
        if translation is not None:
            self.translation = np.asarray(translation, dtype=np.float64).reshape(3)
        if scale is not None:
            if scale <= 0:
                raise ValueError("object scale must be positive")
            self.scale = float(scale)
        self._world = None

    @property
    def world_mesh(self):
        if self._world is None:
            self._world = self.mesh.transformed(self.rotation, self.translation, self.scale)
        return self._world

    def bounding_sphere(self):
        return self.world_mesh.bounding_sphere()

    def points_to_local(self, pts):
        return ((np.asarray(pts) - self.translation) @ self.rotation) / self.scale

    def dirs_to_local(self, dirs):
        return np.asarray(dirs) @ self.rotation


@dataclass
class IncidentLightMap:
    res: int
    l_i: np.ndarray        # (R, R, 3): (1-O) L_env + O L_nerf per texel
    opacity: np.ndarray    # (R, R)
    l_nerf: np.ndarray     # (R, R, 3), opacity-normalized near-field radiance
    l_env: np.ndarray      # (R, R, 3)
    env_only: bool = False # object center outside the field


@dataclass
class InsertConfig:
    incident_res: int = 64
    rays_per_texel: int = 8
    lobe_count: int = 32
    cold_budget: FitBudget = dc_field(default_factory=lambda: FitBudget(max_iters=60))
    warm_budget: FitBudget = dc_field(default_factory=lambda: FitBudget(max_iters=5))
    self_shadow_bias_cells: float = 1.0
    kappa_opacity_threshold: float = 0.5
    far_cutoff_radii: float = 20.0  # beyond this, occlusion factors are exactly 1
    step: StepConfig = dc_field(default_factory=StepConfig)
    pixel_chunk: int = 16384


@dataclass
class FramePacket:
    frame_id: int
    width: int
    height: int
    timings: dict
    image: np.ndarray                 # linear HDR (H, W, 3)
    aux: dict = dc_field(default_factory=dict)

    TIMING_KEYS = ("incident_ms", "sg_ms", "object_ms", "composite_ms", "shadow_ms")

    def png_preview(self, gamma=2.2):
        return encode_png(to_uint8(tonemap(self.image, gamma)))

    def to_bytes(self, buffers=()):
        """Binary packet: header (id u64, w/h u32, timings f32 x5) + PNG +
        the requested aux buffers as named PFM blobs."""
        out = bytearray()
        out += struct.pack("<QII", self.frame_id, self.width, self.height)
        out += struct.pack("<5f", *(self.timings.get(k, 0.0) for k in self.TIMING_KEYS))
        png = self.png_preview()
        out += struct.pack("<I", len(png)) + png
        chosen = [(n, self.aux[n]) for n in buffers if n in self.aux]
        out += struct.pack("<B", len(chosen))
        for name, buf in chosen:
            nb = name.encode()
            blob = pfm_bytes(buf)
            out += struct.pack("<H", len(nb)) + nb
            out += struct.pack("<Q", len(blob)) + blob
        return bytes(out)

    @classmethod
    def header_from_bytes(cls, data):
        fid, w, h = struct.unpack_from("<QII", data, 0)
        timings = dict(zip(cls.TIMING_KEYS, struct.unpack_from("<5f", data, 16)))
        return fid, w, h, timings


def render_background(field, camera, step=None):
    """Plain field render: (color (H,W,3), opacity, depth_norm) buffers."""
    o, d = camera.rays()
    t0, t1, ok = intersect_bounds_batch(field, o, d)
    color, opac, _, depth, _ = march_batch(
        field, o, d, np.where(ok, t0, 0.0), np.where(ok, t1, 0.0), step or StepConfig()
    )
    h, w = camera.height, camera.width
    return color.reshape(h, w, 3), opac.reshape(h, w), depth.reshape(h, w)


class InsertionSession:
    """Owns the per-frame state: warm-start mixture, camera, frame counter."""

    def __init__(self, field, obj=None, env=None, ssdf=None, fh=None, camera=None,
                 seed=0, config=None):
        self.field = field
        self.object = obj
        self.env = env if env is not None else SGMixture([])
        self.ssdf = ssdf
        self.fh = fh
        self.camera = camera or Camera(
            field.center + np.array([0.0, -1.5, 0.5]) * np.max(field.extent), field.center
        )
        self.seed = seed
        self.config = config or InsertConfig()
        self.frame_counter = 0
        self.fitted = None
        self.last_fit = None

    def _fh(self):
        if self.fh is None:
            self.fh = default_fh()
        return self.fh

    # -- stage 1: incident lighting at the object center (Eq. of the blend)

    def build_incident(self):
        cfg = self.config
        r = cfg.incident_res
        center, _ = self.object.bounding_sphere()
        dirs = octa_texel_centers(r).reshape(-1, 3)
        l_env = self.env.evaluate(dirs) if self.env.count else np.zeros((r * r, 3))
        env_only = not bool(np.all(self.field.contains_points(center)))
        if env_only:
            warnings.warn("object center outside the field bbox; env-only incident light")
            opac = np.zeros(r * r)
            l_nerf = np.zeros((r * r, 3))
        else:
            rng = np.random.default_rng((self.seed, self.frame_counter, 0xA11CE))
            k = cfg.rays_per_texel
            cell = 2.0 / r
            uv0 = (np.stack(np.meshgrid(np.arange(r), np.arange(r), indexing="ij"), -1)
                   .reshape(-1, 2).astype(np.float64))
            jitter = rng.random((r * r, k, 2))
            uv = (uv0[:, None, :] + jitter) * cell - 1.0
            jdirs = octa_decode(uv.reshape(-1, 2))
            origins = np.broadcast_to(center, jdirs.shape).copy()
            t0, t1, ok = intersect_bounds_batch(self.field, origins, jdirs)
            color, opacity, _, _, _ = march_batch(
                self.field, origins, jdirs, np.where(ok, t0, 0.0), np.where(ok, t1, 0.0),
                cfg.step,
            )
            color = color.reshape(r * r, k, 3).mean(axis=1)
            opac = opacity.reshape(r * r, k).mean(axis=1)
            l_nerf = color / np.maximum(opac, 1e-6)[:, None]
            l_nerf[opac < 1e-6] = 0.0
        l_i = (1.0 - opac)[:, None] * l_env + opac[:, None] * l_nerf
        return IncidentLightMap(
            r, l_i.reshape(r, r, 3), opac.reshape(r, r),
            l_nerf.reshape(r, r, 3), l_env.reshape(r, r, 3), env_only,
        )

    # -- stage 2: warm-started SG fit of the incident map

    def update_sg(self, incident):
        cfg = self.config
        r = incident.res
        dirs = octa_texel_centers(r).reshape(-1, 3)
        rgb = incident.l_i.reshape(-1, 3)
        weights = octa_solid_angles(r).reshape(-1)
        if self.fitted is None:
            init = cold_start_mixture(dirs, rgb, cfg.lobe_count)
            budget = cfg.cold_budget
        else:
            init = self.fitted
            budget = cfg.warm_budget
        result = fit_mixture(dirs, rgb, weights, init, budget)
        self.fitted = result.mixture
        self.last_fit = result
        return result.mixture

    # -- stage 3: object rendering with per-lobe self-shadow factors

    def _query_object_ssd(self, pts_world, dirs_world):
        """SSDF lookups in the object's local frame (the bake frame).

        Angles are invariant under the rigid + uniform-scale transform, so
        S_world(x, d) = S_local(to_local(x), to_local(d)).
        """
        obj = self.object
        return query_ssd_batch(
            self.ssdf, obj.points_to_local(pts_world), obj.dirs_to_local(dirs_world)
        )

    def _far_mask(self, points):
        """Receivers so far away that the object's occlusion is negligible."""
        local = self.object.points_to_local(points)
        cutoff = self.config.far_cutoff_radii * self.ssdf.r_obj
        return np.linalg.norm(local - self.ssdf.center, axis=-1) >= cutoff

    def _gamma_factors(self, points, normals, mixture):
        """gamma_k = f_h(S(p_k; x), lambda_k) / f_h(pi/2, lambda_k), in [0,1]."""
        p, lam, _ = mixture.arrays()
        m = mixture.count
        n_pts = len(points)
        if self.ssdf is None or m == 0:
            return np.ones((n_pts, m))
        if np.all(self._far_mask(points)):
            return np.ones((n_pts, m))
        bias = self.config.self_shadow_bias_cells * float(self.ssdf.spacing[0]) * self.object.scale
        q_pts = np.repeat(points + bias * normals, m, axis=0)
        q_dirs = np.tile(p, (n_pts, 1))
        s = self._query_object_ssd(q_pts, q_dirs).reshape(n_pts, m)
        table = self._fh()
        num = table.lookup(s, lam[None, :].repeat(n_pts, 0))
        den = table.lookup(np.pi / 2, lam)[None, :]
        return np.clip(num / np.maximum(den, 1e-30), 0.0, 1.0)

    def render_object(self, mixture):
        cam = self.camera
        h, w = cam.height, cam.width
        i_v = np.zeros((h * w, 3))
        depth = np.full(h * w, np.inf)
        mask = np.zeros(h * w, dtype=bool)
        if self.object is None:
            return i_v.reshape(h, w, 3), depth.reshape(h, w), mask.reshape(h, w)
        mesh = self.object.world_mesh
        o, d = cam.rays()
        for lo in range(0, h * w, self.config.pixel_chunk):
            hi = min(h * w, lo + self.config.pixel_chunk)
            t, tri = mesh.ray_hits(o[lo:hi], d[lo:hi])
            hit = np.isfinite(t)
            if not np.any(hit):
                continue
            n = mesh.hit_normals(o[lo:hi], d[lo:hi], t, tri)[hit]
            pts = o[lo:hi][hit] + d[lo:hi][hit] * t[hit][:, None]
            wo = -d[lo:hi][hit]
            # keep shading normals front-facing for the view direction
            flip = np.sum(n * wo, axis=1) < 0.0
            n[flip] = -n[flip]
            gam = self._gamma_factors(pts, n, mixture)
            shaded = shade_points_batch(mixture, gam, self.object.brdf, n, wo)
            idx = np.where(hit)[0] + lo
            i_v[idx] = shaded
            depth[idx] = t[hit]
            mask[idx] = True
        return i_v.reshape(h, w, 3), depth.reshape(h, w), mask.reshape(h, w)

    # -- stage 4: occlusion-aware compositing

    def composite(self, depth, i_v, mask):
        """March the field over the range clamped by the object depth and
        blend: I_alpha I_c + (1 - I_alpha) I_v (identity for object-free pixels)."""
        cam = self.camera
        h, w = cam.height, cam.width
        o, d = cam.rays()
        t0, t1, ok = intersect_bounds_batch(self.field, o, d)
        t0 = np.where(ok, t0, 0.0)
        t1 = np.where(ok, t1, 0.0)
        df = depth.reshape(-1)
        mf = mask.reshape(-1)
        ta = np.where(mf, np.minimum(df, t0), t0)
        tb = np.where(mf, np.minimum(df, t1), t1)
        color, opac, _, depth_norm, _ = march_batch(self.field, o, d, ta, tb, self.config.step)
        i_c = color / np.maximum(opac, 1e-6)[:, None]
        i_c[opac < 1e-6] = 0.0
        blended = np.where(mf[:, None], color + (1.0 - opac)[:, None] * i_v.reshape(-1, 3),
                           color)
        return (
            i_c.reshape(h, w, 3),
            opac.reshape(h, w),
            blended.reshape(h, w, 3),
            depth_norm.reshape(h, w),
        )

    # -- stage 5: shadow attenuation on the background

    def shadow_kappa(self, points, normals, mixture=None):
        """Per-channel kappa in [0,1]: ratio of SG-visibility-weighted to
        unoccluded irradiance sums over the product lobes (light x cosine)."""
        mixture = mixture or self.fitted or self.env
        p, lam, mu = mixture.arrays()
        n_pts = len(points)
        if mixture.count == 0 or self.ssdf is None:
            return np.ones((n_pts, 3))
        far = self._far_mask(points)
        cos_ref = cosine_lobe(np.array([0.0, 0.0, 1.0]))
        lam_c = cos_ref.sharpness
        mu_c = cos_ref.amplitude[0]
        v = lam[None, :, None] * p[None, :, :] + lam_c * normals[:, None, :]
        lam3 = np.linalg.norm(v, axis=-1)                    # (N, M)
        safe = np.maximum(lam3, 1e-12)
        axes3 = v / safe[..., None]
        mu3 = mu[None, :, :] * mu_c * np.exp(lam3 - lam[None, :] - lam_c)[..., None]
        q_pts = np.repeat(points, mixture.count, axis=0)
        s = self._query_object_ssd(q_pts, axes3.reshape(-1, 3)).reshape(n_pts, -1)
        table = self._fh()
        f_vis = table.lookup(s, lam3)
        f_all = table.lookup(np.full_like(lam3, np.pi / 2), lam3)
        num = np.einsum("nm,nmc->nc", f_vis, mu3)
        den = np.einsum("nm,nmc->nc", f_all, mu3)
        kappa = np.where(den > 1e-30, num / np.maximum(den, 1e-30), 1.0)
        kappa[far] = 1.0
        return np.clip(kappa, 0.0, 1.0)

    # -- full frame

    def render_frame(self, buffers=()):
        cfg = self.config
        cam = self.camera
        h, w = cam.height, cam.width
        timings = {}
        aux = {}
        if self.object is None:
            t = time.perf_counter()
            color, opac, _ = render_background(self.field, cam, cfg.step)
            timings = dict.fromkeys(FramePacket.TIMING_KEYS, 0.0)
            timings["composite_ms"] = (time.perf_counter() - t) * 1e3
            packet = FramePacket(self.frame_counter, w, h, timings, color,
                                 {"i_alpha": opac} if "i_alpha" in buffers else {})
            self.frame_counter += 1
            return packet

        t = time.perf_counter()
        incident = self.build_incident()
        timings["incident_ms"] = (time.perf_counter() - t) * 1e3

        t = time.perf_counter()
        mixture = self.update_sg(incident)
        timings["sg_ms"] = (time.perf_counter() - t) * 1e3

        t = time.perf_counter()
        i_v, depth, mask = self.render_object(mixture)
        timings["object_ms"] = (time.perf_counter() - t) * 1e3

        t = time.perf_counter()
        i_c, i_alpha, blended, depth_norm = self.composite(depth, i_v, mask)
        timings["composite_ms"] = (time.perf_counter() - t) * 1e3

        t = time.perf_counter()
        kappa = np.ones((h, w, 3))
        recv = (~mask) & (i_alpha >= cfg.kappa_opacity_threshold)
        if np.any(recv) and self.ssdf is not None:
            o, d = cam.rays()
            rf = recv.reshape(-1)
            pts = o[rf] + d[rf] * depth_norm.reshape(-1)[rf][:, None]
            pts = np.clip(pts, self.field.bbox_min + 1e-9, self.field.bbox_max - 1e-9)
            g = _gradient_batch(self.field, pts)
            gn = np.linalg.norm(g, axis=1)
            ok_n = gn > 1e-12
            normals = np.where(ok_n[:, None], -g / np.maximum(gn, 1e-30)[:, None],
                               -d[rf])
            kap = self.shadow_kappa(pts, normals, mixture)
            kap[~ok_n] = 1.0
            kappa.reshape(-1, 3)[rf] = kap
        final = blended * kappa
        timings["shadow_ms"] = (time.perf_counter() - t) * 1e3

        if "i_alpha" in buffers:
            aux["i_alpha"] = i_alpha
        if "kappa" in buffers:
            aux["kappa"] = kappa.mean(axis=2)
        if "kappa_rgb" in buffers:
            aux["kappa_rgb"] = kappa
        if "depth" in buffers:
            aux["depth"] = np.where(np.isfinite(depth), depth, 0.0)
        if "mask" in buffers:
            aux["mask"] = mask.astype(np.float64)
        if "object" in buffers:
            aux["object"] = i_v
        if "incident" in buffers:
            aux["incident"] = incident.l_i
        if "incident_fit" in buffers:
            dirs = octa_texel_centers(incident.res)
            aux["incident_fit"] = mixture.evaluate(dirs.reshape(-1, 3)).reshape(
                incident.res, incident.res, 3
            )
        packet = FramePacket(self.frame_counter, w, h, timings, final, aux)
        self.frame_counter += 1
        return packet
