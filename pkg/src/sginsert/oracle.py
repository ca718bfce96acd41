"""Brute-force references for tests and acceptance: Monte-Carlo frame
rendering and shadow-ratio estimation with exact ray-mesh visibility.

Direct illumination only; the oracle evaluates incident light by marching
from the true shading point (the engine approximates with the object-center
map), so comparisons carry the small-object assumption.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .field import StepConfig, _gradient_batch, intersect_bounds_batch, march_batch
from .geom import cosine_sample_hemisphere, normalize, orthonormal_basis
from .sg import SGMixture


@dataclass
class OracleConfig:
    spp: int = 256                 # BRDF/light samples per object pixel
    kappa_samples: int = 65536     # visibility samples per mc_kappa call
    bg_kappa_samples: int = 2048   # per background surface pixel in mc_render
    seed: int = 0
    step: StepConfig = dc_field(default_factory=StepConfig)
    pixel_chunk: int = 2048
    opacity_threshold: float = 0.5


def _ggx_sample_half(n, alpha, u1, u2):
    phi = 2.0 * np.pi * u2
    ct = np.sqrt(np.maximum(0.0, (1.0 - u1) / (1.0 + (alpha * alpha - 1.0) * u1)))
    st = np.sqrt(np.maximum(0.0, 1.0 - ct * ct))
    local = np.stack([st * np.cos(phi), st * np.sin(phi), ct], axis=-1)
    t1, t2 = orthonormal_basis(n)
    return local[..., 0:1] * t1 + local[..., 1:2] * t2 + local[..., 2:3] * n


def _ggx_d(nh, alpha):
    a2 = alpha * alpha
    return a2 / (np.pi * np.maximum(nh * nh * (a2 - 1.0) + 1.0, 1e-12) ** 2)


def _smith_g1(c, r):
    k = (r + 1.0) ** 2 / 8.0
    return c / (c * (1.0 - k) + k)


def brdf_eval(brdf, n, wo, wi):
    """Simplified Disney BRDF value (diffuse + GGX specular), arrays ok."""
    ndl = np.maximum(np.sum(n * wi, axis=-1), 0.0)
    ndv = np.maximum(np.sum(n * wo, axis=-1), 1e-6)
    h = normalize(wi + wo)
    nh = np.maximum(np.sum(n * h, axis=-1), 0.0)
    vh = np.clip(np.sum(wo * h, axis=-1), 0.0, 1.0)
    alpha = max(brdf.roughness**2, 1e-3)
    d = _ggx_d(nh, alpha)
    f0 = brdf.f0_rgb()
    fres = f0[None, :] + (1.0 - f0)[None, :] * (1.0 - vh[..., None]) ** 5
    g = _smith_g1(np.maximum(ndl, 1e-6), brdf.roughness) * _smith_g1(ndv, brdf.roughness)
    spec = fres * (d * g / (4.0 * np.maximum(ndl, 1e-6) * ndv))[..., None]
    diff = (brdf.diffuse_rgb() / np.pi)[None, :]
    return np.where(ndl[..., None] > 0.0, diff + spec, 0.0)


def _brdf_pdf(brdf, n, wo, wi):
    """pdf of the 50/50 cosine + GGX-NDF mixture used by mc_render."""
    ndl = np.maximum(np.sum(n * wi, axis=-1), 0.0)
    h = normalize(wi + wo)
    nh = np.maximum(np.sum(n * h, axis=-1), 0.0)
    vh = np.maximum(np.abs(np.sum(wo * h, axis=-1)), 1e-8)
    alpha = max(brdf.roughness**2, 1e-3)
    pdf_spec = _ggx_d(nh, alpha) * nh / (4.0 * vh)
    pdf_diff = ndl / np.pi
    return 0.5 * pdf_diff + 0.5 * pdf_spec


def incident_radiance(field, env, origins, dirs, step):
    """Eq.-style blend marched from the true points: (1-O) L_env + C-hat."""
    t0, t1, ok = intersect_bounds_batch(field, origins, dirs)
    color, opac, _, _, _ = march_batch(field, origins, dirs,
                                       np.where(ok, t0, 0.0), np.where(ok, t1, 0.0), step)
    l_env = env.evaluate(dirs) if env.count else np.zeros_like(color)
    return (1.0 - opac)[:, None] * l_env + color


def mc_kappa(mixture, mesh, x, n, cfg=None):
    """Shadow ratio at (x, n): cosine-weighted MC of both Eq. integrals with
    exact mesh visibility.  Returns (kappa RGB, standard error RGB)."""
    cfg = cfg or OracleConfig()
    n = np.asarray(n, dtype=np.float64).reshape(3)
    if abs(np.linalg.norm(n) - 1.0) > 1e-6:
        raise ValueError("mc_kappa normal must be unit length")
    x = np.asarray(x, dtype=np.float64).reshape(3)
    rng = np.random.default_rng(cfg.seed)
    count = cfg.kappa_samples
    dirs = cosine_sample_hemisphere(n, rng.random(count), rng.random(count))
    li = mixture.evaluate(dirs) if mixture.count else np.zeros((count, 3))
    if mesh is not None:
        origins = np.broadcast_to(x, dirs.shape).copy()
        vis = ~mesh.ray_any(origins, dirs)
    else:
        vis = np.ones(count, dtype=bool)
    num = li * vis[:, None]
    den_total = li.sum(axis=0)
    kappa = np.where(den_total > 1e-30, num.sum(axis=0) / np.maximum(den_total, 1e-30), 1.0)
    # batch-means standard error of the ratio
    nb = 16
    per = count // nb
    bk = []
    for b in range(nb):
        sl = slice(b * per, (b + 1) * per)
        dd = li[sl].sum(axis=0)
        bk.append(np.where(dd > 1e-30, num[sl].sum(axis=0) / np.maximum(dd, 1e-30), 1.0))
    bk = np.stack(bk)
    stderr = bk.std(axis=0, ddof=1) / np.sqrt(nb)
    return np.clip(kappa, 0.0, 1.0), stderr


def mc_kappa_batch(mixture, mesh, pts, normals, samples=4096, seed=0):
    """Vectorized mc_kappa over receiver points (shared sample count)."""
    rng = np.random.default_rng(seed)
    n_pts = len(pts)
    out = np.ones((n_pts, 3))
    for i in range(n_pts):
        dirs = cosine_sample_hemisphere(normals[i], rng.random(samples), rng.random(samples))
        li = mixture.evaluate(dirs)
        origins = np.broadcast_to(pts[i], dirs.shape).copy()
        vis = ~mesh.ray_any(origins, dirs)
        den = li.sum(axis=0)
        num = (li * vis[:, None]).sum(axis=0)
        out[i] = np.where(den > 1e-30, num / np.maximum(den, 1e-30), 1.0)
    return np.clip(out, 0.0, 1.0)


def mc_render(field, obj, env, camera, cfg=None):
    """Reference render: BRDF-sampled direct lighting on the object, marched
    background attenuated by MC object visibility.  Seed-deterministic."""
    cfg = cfg or OracleConfig()
    rng = np.random.default_rng(cfg.seed)
    h, w = camera.height, camera.width
    o, d = camera.rays()
    out = np.zeros((h * w, 3))

    mesh = obj.world_mesh if obj is not None else None
    if mesh is not None:
        t_hit, tri = mesh.ray_hits(o, d)
        hit = np.isfinite(t_hit)
    else:
        hit = np.zeros(h * w, dtype=bool)

    # background: march, then attenuate surface pixels by MC kappa
    bg = ~hit
    t0, t1, ok = intersect_bounds_batch(field, o[bg], d[bg])
    ta = np.where(ok, t0, 0.0)
    tb = np.where(ok, t1, 0.0)
    color, opac, _, depth, _ = march_batch(field, o[bg], d[bg], ta, tb, cfg.step)
    if mesh is not None:
        surf = opac >= cfg.opacity_threshold
        idx = np.where(surf)[0]
        pts = o[bg][idx] + d[bg][idx] * depth[idx][:, None]
        pts = np.clip(pts, field.bbox_min + 1e-9, field.bbox_max - 1e-9)
        g = _gradient_batch(field, pts)
        gn = np.linalg.norm(g, axis=1)
        normals = np.where((gn > 1e-12)[:, None], -g / np.maximum(gn, 1e-30)[:, None],
                           -d[bg][idx])
        kap = mc_kappa_batch(env, mesh, pts, normals, cfg.bg_kappa_samples, cfg.seed + 17)
        color[idx] *= kap
    out[bg] = color

    # object pixels: BRDF importance sampling against marched incident light
    hi = np.where(hit)[0]
    if len(hi):
        n_all = mesh.hit_normals(o, d, t_hit, tri)
        for lo_i in range(0, len(hi), cfg.pixel_chunk):
            sel = hi[lo_i : lo_i + cfg.pixel_chunk]
            pts = o[sel] + d[sel] * t_hit[sel][:, None]
            n = n_all[sel]
            wo = -d[sel]
            flip = np.sum(n * wo, axis=1) < 0.0
            n[flip] = -n[flip]
            acc = np.zeros((len(sel), 3))
            alpha = max(obj.brdf.roughness**2, 1e-3)
            for _s in range(cfg.spp):
                pick = rng.random(len(sel)) < 0.5
                wi = np.empty_like(n)
                wi[pick] = cosine_sample_hemisphere(
                    n[pick], rng.random(pick.sum()), rng.random(pick.sum())
                )
                hs = _ggx_sample_half(n[~pick], alpha, rng.random((~pick).sum()),
                                      rng.random((~pick).sum()))
                wi[~pick] = 2.0 * np.sum(wo[~pick] * hs, axis=-1, keepdims=True) * hs - wo[~pick]
                ndl = np.sum(n * wi, axis=-1)
                good = ndl > 1e-6
                if not np.any(good):
                    continue
                pdf = _brdf_pdf(obj.brdf, n[good], wo[good], wi[good])
                fr = brdf_eval(obj.brdf, n[good], wo[good], wi[good])
                org = pts[good] + n[good] * 1e-6
                blocked = mesh.ray_any(org, wi[good])
                li = incident_radiance(field, env, org, wi[good], cfg.step)
                li[blocked] = 0.0
                contrib = fr * li * (ndl[good] / np.maximum(pdf, 1e-12))[:, None]
                accg = acc[good]
                accg += np.where(np.isfinite(contrib), contrib, 0.0)
                acc[good] = accg
            out[sel] = acc / cfg.spp
    return out.reshape(h, w, 3)
