# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: fixed-step ray marching and BVH mesh intersection.

Mirrors kernels/pykernels.py; selected at import by sginsert.kernels.
"""

import numpy as np

cimport numpy as cnp
cimport openmp
from cython.parallel cimport prange
from libc.math cimport INFINITY, ceil, exp, fabs

cnp.import_array()

BACKEND = "compiled"


cdef inline double _clampd(double x, double lo, double hi) noexcept nogil:
    if x < lo:
        return lo
    if x > hi:
        return hi
    return x


cdef inline double _trilerp1(const double* grid, int nz, int ny, int nx,
                             double gx, double gy, double gz) noexcept nogil:
    cdef int ix, iy, iz
    cdef double fx, fy, fz, c00, c10, c01, c11, c0, c1
    cdef long s
    cdef const double* g0
    gx = _clampd(gx, 0.0, nx - 1.0 - 1e-9)
    gy = _clampd(gy, 0.0, ny - 1.0 - 1e-9)
    gz = _clampd(gz, 0.0, nz - 1.0 - 1e-9)
    ix = <int>gx; iy = <int>gy; iz = <int>gz
    fx = gx - ix; fy = gy - iy; fz = gz - iz
    s = <long>ny * nx
    g0 = grid + iz * s + iy * nx + ix
    c00 = g0[0] * (1 - fx) + g0[1] * fx
    c10 = g0[nx] * (1 - fx) + g0[nx + 1] * fx
    c01 = g0[s] * (1 - fx) + g0[s + 1] * fx
    c11 = g0[s + nx] * (1 - fx) + g0[s + nx + 1] * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


cdef inline void _trilerp3(const double* grid, int nz, int ny, int nx,
                           double gx, double gy, double gz,
                           double* r0, double* r1, double* r2) noexcept nogil:
    cdef int ix, iy, iz, c
    cdef double fx, fy, fz, c00, c10, c01, c11, c0, c1
    cdef long sz, sy
    cdef const double* g0
    cdef double out[3]
    gx = _clampd(gx, 0.0, nx - 1.0 - 1e-9)
    gy = _clampd(gy, 0.0, ny - 1.0 - 1e-9)
    gz = _clampd(gz, 0.0, nz - 1.0 - 1e-9)
    ix = <int>gx; iy = <int>gy; iz = <int>gz
    fx = gx - ix; fy = gy - iy; fz = gz - iz
    sz = <long>ny * nx * 3
    sy = <long>nx * 3
    g0 = grid + iz * sz + iy * sy + ix * 3
    for c in range(3):
        c00 = g0[c] * (1 - fx) + g0[3 + c] * fx
        c10 = g0[sy + c] * (1 - fx) + g0[sy + 3 + c] * fx
        c01 = g0[sz + c] * (1 - fx) + g0[sz + 3 + c] * fx
        c11 = g0[sz + sy + c] * (1 - fx) + g0[sz + sy + 3 + c] * fx
        c0 = c00 * (1 - fy) + c10 * fy
        c1 = c01 * (1 - fy) + c11 * fy
        out[c] = c0 * (1 - fz) + c1 * fz
    r0[0] = out[0]
    r1[0] = out[1]
    r2[0] = out[2]


def march_rays(double[:, :, ::1] density, double[:, :, :, ::1] emission,
               double[::1] bbox_min, double[::1] cell,
               double[:, ::1] origins, double[:, ::1] dirs,
               double[::1] t0, double[::1] t1, double step,
               long max_steps=1000000, double stop_transmittance=1e-7,
               int threads=0, int chunk=0):
    cdef Py_ssize_t n = origins.shape[0]
    color = np.zeros((n, 3))
    opacity = np.zeros(n)
    depth = np.zeros(n)
    cdef double[:, ::1] col_v = color
    cdef double[::1] opa_v = opacity
    cdef double[::1] dep_v = depth
    cdef int nz = density.shape[0], ny = density.shape[1], nx = density.shape[2]
    cdef const double* dgrid = &density[0, 0, 0]
    cdef const double* egrid = &emission[0, 0, 0, 0]
    cdef double bx = bbox_min[0], by = bbox_min[1], bz = bbox_min[2]
    cdef double icx = 1.0 / cell[0], icy = 1.0 / cell[1], icz = 1.0 / cell[2]
    cdef Py_ssize_t i
    cdef long k, nsteps
    cdef double seg, tstart, tend, delta, tmid, px, py, pz
    cdef double sig, alpha, trans, cr, cg, cb, dsum, r0, r1, r2
    cdef double ox, oy, oz, dx, dy, dz
    cdef int nthreads = threads if threads > 0 else openmp.omp_get_max_threads()

    with nogil:
        for i in prange(n, num_threads=nthreads, schedule='static'):
            ox = origins[i, 0]; oy = origins[i, 1]; oz = origins[i, 2]
            dx = dirs[i, 0]; dy = dirs[i, 1]; dz = dirs[i, 2]
            seg = t1[i] - t0[i]
            if seg <= 0.0:
                continue
            nsteps = <long>ceil(seg / step - 1e-12)
            if nsteps > max_steps:
                nsteps = max_steps
            trans = 1.0
            cr = 0.0; cg = 0.0; cb = 0.0; dsum = 0.0
            r0 = 0.0; r1 = 0.0; r2 = 0.0
            for k in range(nsteps):
                if trans < stop_transmittance:
                    break
                tstart = t0[i] + k * step
                tend = tstart + step
                if tend > t1[i]:
                    tend = t1[i]
                delta = tend - tstart
                if delta <= 0.0:
                    break
                tmid = tstart + 0.5 * delta
                px = (ox + dx * tmid - bx) * icx - 0.5
                py = (oy + dy * tmid - by) * icy - 0.5
                pz = (oz + dz * tmid - bz) * icz - 0.5
                sig = _trilerp1(dgrid, nz, ny, nx, px, py, pz)
                alpha = 1.0 - exp(-sig * delta)
                if alpha > 0.0:
                    _trilerp3(egrid, nz, ny, nx, px, py, pz, &r0, &r1, &r2)
                    cr = cr + trans * alpha * r0
                    cg = cg + trans * alpha * r1
                    cb = cb + trans * alpha * r2
                    dsum = dsum + trans * alpha * tmid
                    trans = trans * (1.0 - alpha)
            col_v[i, 0] = cr; col_v[i, 1] = cg; col_v[i, 2] = cb
            opa_v[i] = 1.0 - trans
            dep_v[i] = dsum
    return color, opacity, depth


# ---------------------------------------------------------------------------
# BVH traversal


cdef inline unsigned char _hit_tri(double ox, double oy, double oz,
                                   double dx, double dy, double dz,
                                   const double* p0, const double* e1, const double* e2,
                                   double t_min, double t_max, double* t_out) noexcept nogil:
    cdef double pvx, pvy, pvz, det, inv, tvx, tvy, tvz, u, qvx, qvy, qvz, v, t
    pvx = dy * e2[2] - dz * e2[1]
    pvy = dz * e2[0] - dx * e2[2]
    pvz = dx * e2[1] - dy * e2[0]
    det = e1[0] * pvx + e1[1] * pvy + e1[2] * pvz
    if fabs(det) <= 1e-14:
        return 0
    inv = 1.0 / det
    tvx = ox - p0[0]; tvy = oy - p0[1]; tvz = oz - p0[2]
    u = (tvx * pvx + tvy * pvy + tvz * pvz) * inv
    if u < -1e-12 or u > 1.0 + 1e-12:
        return 0
    qvx = tvy * e1[2] - tvz * e1[1]
    qvy = tvz * e1[0] - tvx * e1[2]
    qvz = tvx * e1[1] - tvy * e1[0]
    v = (dx * qvx + dy * qvy + dz * qvz) * inv
    if v < -1e-12 or u + v > 1.0 + 1e-12:
        return 0
    t = (e2[0] * qvx + e2[1] * qvy + e2[2] * qvz) * inv
    if t <= t_min or t >= t_max:
        return 0
    t_out[0] = t
    return 1


cdef inline unsigned char _slab(double ox, double oy, double oz,
                                double idx, double idy, double idz,
                                const double* bmin, const double* bmax,
                                double t_best) noexcept nogil:
    cdef double tn = 0.0, tf = t_best, ta, tb, tmp
    ta = (bmin[0] - ox) * idx; tb = (bmax[0] - ox) * idx
    if ta > tb: tmp = ta; ta = tb; tb = tmp
    if ta > tn: tn = ta
    if tb < tf: tf = tb
    if tn > tf: return 0
    ta = (bmin[1] - oy) * idy; tb = (bmax[1] - oy) * idy
    if ta > tb: tmp = ta; ta = tb; tb = tmp
    if ta > tn: tn = ta
    if tb < tf: tf = tb
    if tn > tf: return 0
    ta = (bmin[2] - oz) * idz; tb = (bmax[2] - oz) * idz
    if ta > tb: tmp = ta; ta = tb; tb = tmp
    if ta > tn: tn = ta
    if tb < tf: tf = tb
    if tn > tf: return 0
    return 1


def mesh_hit(nodes, tris, double[:, ::1] origins, double[:, ::1] dirs,
             double t_min=1e-9, double t_max=INFINITY, int threads=0):
    cdef double[:, ::1] nmin = nodes.bmin
    cdef double[:, ::1] nmax = nodes.bmax
    cdef int[::1] left = nodes.left
    cdef int[::1] start = nodes.start
    cdef int[::1] count = nodes.count
    cdef double[:, ::1] p0 = tris.p0
    cdef double[:, ::1] e1 = tris.e1
    cdef double[:, ::1] e2 = tris.e2
    cdef Py_ssize_t n = origins.shape[0]
    t_arr = np.full(n, np.inf)
    id_arr = np.full(n, -1, dtype=np.int32)
    cdef double[::1] t_v = t_arr
    cdef int[::1] id_v = id_arr
    cdef int nthreads = threads if threads > 0 else openmp.omp_get_max_threads()
    stack_buf = np.zeros((nthreads, 64), dtype=np.int32)
    cdef int[:, ::1] stack = stack_buf
    cdef Py_ssize_t i
    cdef int sp, node, j, tid, besti
    cdef double ox, oy, oz, dx, dy, dz, idx, idy, idz, best, th

    with nogil:
        for i in prange(n, num_threads=nthreads, schedule='static'):
            tid = openmp.omp_get_thread_num()
            ox = origins[i, 0]; oy = origins[i, 1]; oz = origins[i, 2]
            dx = dirs[i, 0]; dy = dirs[i, 1]; dz = dirs[i, 2]
            idx = 1.0 / dx if fabs(dx) > 1e-300 else 1e300
            idy = 1.0 / dy if fabs(dy) > 1e-300 else 1e300
            idz = 1.0 / dz if fabs(dz) > 1e-300 else 1e300
            best = t_max
            besti = -1
            th = 0.0
            stack[tid, 0] = 0
            sp = 1
            while sp > 0:
                sp = sp - 1
                node = stack[tid, sp]
                if not _slab(ox, oy, oz, idx, idy, idz, &nmin[node, 0], &nmax[node, 0], best):
                    continue
                if left[node] < 0:
                    for j in range(start[node], start[node] + count[node]):
                        if _hit_tri(ox, oy, oz, dx, dy, dz, &p0[j, 0], &e1[j, 0], &e2[j, 0], t_min, best, &th):
                            best = th
                            besti = j
                else:
                    stack[tid, sp] = left[node]
                    sp = sp + 1
                    stack[tid, sp] = left[node] + 1
                    sp = sp + 1
            if besti >= 0:
                t_v[i] = best
                id_v[i] = besti
    return t_arr, id_arr


def mesh_any(nodes, tris, double[:, ::1] origins, double[:, ::1] dirs,
             double t_min=1e-9, double t_max=INFINITY, int threads=0):
    cdef double[:, ::1] nmin = nodes.bmin
    cdef double[:, ::1] nmax = nodes.bmax
    cdef int[::1] left = nodes.left
    cdef int[::1] start = nodes.start
    cdef int[::1] count = nodes.count
    cdef double[:, ::1] p0 = tris.p0
    cdef double[:, ::1] e1 = tris.e1
    cdef double[:, ::1] e2 = tris.e2
    cdef Py_ssize_t n = origins.shape[0]
    hit = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[::1] hit_v = hit
    cdef int nthreads = threads if threads > 0 else openmp.omp_get_max_threads()
    stack_buf = np.zeros((nthreads, 64), dtype=np.int32)
    cdef int[:, ::1] stack = stack_buf
    cdef Py_ssize_t i
    cdef int sp, node, j, tid
    cdef double ox, oy, oz, dx, dy, dz, idx, idy, idz, th
    cdef unsigned char found

    with nogil:
        for i in prange(n, num_threads=nthreads, schedule='static'):
            tid = openmp.omp_get_thread_num()
            ox = origins[i, 0]; oy = origins[i, 1]; oz = origins[i, 2]
            dx = dirs[i, 0]; dy = dirs[i, 1]; dz = dirs[i, 2]
            idx = 1.0 / dx if fabs(dx) > 1e-300 else 1e300
            idy = 1.0 / dy if fabs(dy) > 1e-300 else 1e300
            idz = 1.0 / dz if fabs(dz) > 1e-300 else 1e300
            found = 0
            th = 0.0
            stack[tid, 0] = 0
            sp = 1
            while sp > 0 and found == 0:
                sp = sp - 1
                node = stack[tid, sp]
                if not _slab(ox, oy, oz, idx, idy, idz, &nmin[node, 0], &nmax[node, 0], t_max):
                    continue
                if left[node] < 0:
                    for j in range(start[node], start[node] + count[node]):
                        if _hit_tri(ox, oy, oz, dx, dy, dz, &p0[j, 0], &e1[j, 0], &e2[j, 0], t_min, t_max, &th):
                            found = 1
                            break
                else:
                    stack[tid, sp] = left[node]
                    sp = sp + 1
                    stack[tid, sp] = left[node] + 1
                    sp = sp + 1
            hit_v[i] = found
    return hit.view(bool)
