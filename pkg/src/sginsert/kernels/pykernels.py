"""Pure-numpy fallback kernels (same contracts as the compiled extension).

Ray marching is vectorized over ray chunks with padded sample counts; mesh
intersection brute-forces Moller-Trumbore over triangle blocks instead of
walking the BVH.  Slower than the extension but bit-compatible in behavior.
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"

_T_EPS = 1e-9


def _trilerp(grid, gx, gy, gz):
    """Cell-centered trilinear sample; gx/gy/gz already in voxel coordinates."""
    nz, ny, nx = grid.shape[:3]
    gx = np.clip(gx, 0.0, nx - 1.0 - 1e-9)
    gy = np.clip(gy, 0.0, ny - 1.0 - 1e-9)
    gz = np.clip(gz, 0.0, nz - 1.0 - 1e-9)
    ix = gx.astype(np.int64)
    iy = gy.astype(np.int64)
    iz = gz.astype(np.int64)
    fx = gx - ix
    fy = gy - iy
    fz = gz - iz
    if grid.ndim == 4:
        fx = fx[..., None]
        fy = fy[..., None]
        fz = fz[..., None]
    c000 = grid[iz, iy, ix]
    c100 = grid[iz, iy, ix + 1]
    c010 = grid[iz, iy + 1, ix]
    c110 = grid[iz, iy + 1, ix + 1]
    c001 = grid[iz + 1, iy, ix]
    c101 = grid[iz + 1, iy, ix + 1]
    c011 = grid[iz + 1, iy + 1, ix]
    c111 = grid[iz + 1, iy + 1, ix + 1]
    c00 = c000 * (1 - fx) + c100 * fx
    c10 = c010 * (1 - fx) + c110 * fx
    c01 = c001 * (1 - fx) + c101 * fx
    c11 = c011 * (1 - fx) + c111 * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


def march_rays(density, emission, bbox_min, cell, origins, dirs, t0, t1, step,
               max_steps=1_000_000, stop_transmittance=1e-7, threads=0, chunk=2048):
    """Transmittance-weighted sums along rays with fixed-step midpoint sampling.

    The last interval is truncated to end exactly at t1 so extending a range
    only appends factors.  Returns (color (N,3), opacity (N,), depth_raw (N,)).
    """
    n = len(origins)
    color = np.zeros((n, 3))
    opacity = np.zeros(n)
    depth = np.zeros(n)
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        o = origins[lo:hi]
        d = dirs[lo:hi]
        a = t0[lo:hi]
        b = t1[lo:hi]
        seg = np.maximum(b - a, 0.0)
        counts = np.minimum(np.ceil(seg / step - 1e-12).astype(np.int64), max_steps)
        counts = np.maximum(counts, 0)
        smax = int(counts.max()) if len(counts) else 0
        if smax == 0:
            continue
        k = np.arange(smax)
        starts = a[:, None] + k[None, :] * step
        ends = np.minimum(starts + step, b[:, None])
        valid = k[None, :] < counts[:, None]
        delta = np.where(valid, np.maximum(ends - starts, 0.0), 0.0)
        tmid = starts + 0.5 * delta
        pos = o[:, None, :] + d[:, None, :] * tmid[..., None]
        gx = (pos[..., 0] - bbox_min[0]) / cell[0] - 0.5
        gy = (pos[..., 1] - bbox_min[1]) / cell[1] - 0.5
        gz = (pos[..., 2] - bbox_min[2]) / cell[2] - 0.5
        sig = _trilerp(density, gx, gy, gz)
        alpha = np.where(valid, 1.0 - np.exp(-sig * delta), 0.0)
        trans = np.cumprod(1.0 - alpha, axis=1)
        tk = np.concatenate([np.ones((hi - lo, 1)), trans[:, :-1]], axis=1)
        # emulate the per-ray early-out of the compiled kernel: samples reached
        # with transmittance below the floor are never processed
        live = tk >= stop_transmittance
        wk = np.where(live, tk * alpha, 0.0)
        col = _trilerp(emission, gx, gy, gz)
        color[lo:hi] = np.sum(wk[..., None] * col, axis=1)
        any_live = live.any(axis=1)
        last_live = np.where(any_live, live.shape[1] - 1 - np.argmax(live[:, ::-1], axis=1), 0)
        tlast = np.where(any_live, trans[np.arange(hi - lo), last_live], 1.0)
        opacity[lo:hi] = 1.0 - tlast
        depth[lo:hi] = np.sum(wk * tmid, axis=1)
    return color, opacity, depth


def _moller_trumbore_block(o, d, p0, e1, e2, t_min, t_max):
    """Hit t values for a (rays x tris) block; +inf where no hit."""
    pv = np.cross(d[:, None, :], e2[None, :, :])
    det = np.sum(e1[None, :, :] * pv, axis=-1)
    inv = np.where(np.abs(det) > 1e-14, 1.0 / np.where(det == 0, 1.0, det), 0.0)
    tv = o[:, None, :] - p0[None, :, :]
    u = np.sum(tv * pv, axis=-1) * inv
    qv = np.cross(tv, e1[None, :, :])
    v = np.sum(d[:, None, :] * qv, axis=-1) * inv
    t = np.sum(e2[None, :, :] * qv, axis=-1) * inv
    ok = (
        (np.abs(det) > 1e-14)
        & (u >= -1e-12)
        & (v >= -1e-12)
        & (u + v <= 1.0 + 1e-12)
        & (t > t_min)
        & (t < t_max)
    )
    return np.where(ok, t, np.inf)


def mesh_hit(nodes, tris, origins, dirs, t_min=_T_EPS, t_max=np.inf,
             threads=0, ray_chunk=2048, tri_chunk=512):
    """Nearest hit against the triangle soup: (t (N,), tri (N,) int32).

    nodes (the BVH) is unused here; the fallback brute-forces all triangles.
    """
    p0, e1, e2 = tris.p0, tris.e1, tris.e2
    n = len(origins)
    best_t = np.full(n, np.inf)
    best_i = np.full(n, -1, dtype=np.int32)
    for rlo in range(0, n, ray_chunk):
        rhi = min(n, rlo + ray_chunk)
        o = origins[rlo:rhi]
        d = dirs[rlo:rhi]
        bt = best_t[rlo:rhi]
        bi = best_i[rlo:rhi]
        for tlo in range(0, len(p0), tri_chunk):
            thi = min(len(p0), tlo + tri_chunk)
            t = _moller_trumbore_block(o, d, p0[tlo:thi], e1[tlo:thi], e2[tlo:thi], t_min, t_max)
            j = np.argmin(t, axis=1)
            tj = t[np.arange(len(o)), j]
            better = tj < bt
            bt[better] = tj[better]
            bi[better] = (tlo + j[better]).astype(np.int32)
        best_t[rlo:rhi] = bt
        best_i[rlo:rhi] = bi
    return best_t, best_i


def mesh_any(nodes, tris, origins, dirs, t_min=_T_EPS, t_max=np.inf,
             threads=0, ray_chunk=2048, tri_chunk=512):
    """Boolean any-hit within (t_min, t_max)."""
    t, _ = mesh_hit(nodes, tris, origins, dirs, t_min, t_max,
                    ray_chunk=ray_chunk, tri_chunk=tri_chunk)
    return np.isfinite(t)
