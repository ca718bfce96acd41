"""Triangle meshes: OBJ IO, a median-split BVH, ray queries, test shapes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .geom import normalize


@dataclass
class TriangleSoup:
    """BVH-ordered triangles as (p0, e1, e2) for Moller-Trumbore."""

    p0: np.ndarray
    e1: np.ndarray
    e2: np.ndarray


@dataclass
class BVHNodes:
    """Flat BVH; children of an inner node i are left[i] and left[i]+1."""

    bmin: np.ndarray
    bmax: np.ndarray
    left: np.ndarray   # int32, -1 for leaves
    start: np.ndarray  # int32, leaf triangle range start
    count: np.ndarray  # int32, leaf triangle count


def build_bvh(vertices, faces, leaf_size=4):
    tri = vertices[faces]                      # (F, 3, 3)
    lo = tri.min(axis=1)
    hi = tri.max(axis=1)
    cen = tri.mean(axis=1)
    order = np.arange(len(faces))

    bmin, bmax, left, start, count = [], [], [], [], []

    def new_node():
        bmin.append(None)
        bmax.append(None)
        left.append(-1)
        start.append(0)
        count.append(0)
        return len(left) - 1

    root = new_node()
    stack = [(root, 0, len(faces))]
    while stack:
        node, a, b = stack.pop()
        idx = order[a:b]
        bmin[node] = lo[idx].min(axis=0)
        bmax[node] = hi[idx].max(axis=0)
        if b - a <= leaf_size:
            start[node] = a
            count[node] = b - a
            continue
        axis = int(np.argmax(bmax[node] - bmin[node]))
        mid = (a + b) // 2
        part = np.argpartition(cen[idx, axis], mid - a)
        order[a:b] = idx[part]
        lchild = new_node()
        new_node()  # right child, adjacent by construction
        left[node] = lchild
        stack.append((lchild, a, mid))
        stack.append((lchild + 1, mid, b))

    nodes = BVHNodes(
        np.ascontiguousarray(np.stack(bmin), dtype=np.float64),
        np.ascontiguousarray(np.stack(bmax), dtype=np.float64),
        np.asarray(left, dtype=np.int32),
        np.asarray(start, dtype=np.int32),
        np.asarray(count, dtype=np.int32),
    )
    p0 = np.ascontiguousarray(tri[order, 0], dtype=np.float64)
    e1 = np.ascontiguousarray(tri[order, 1] - tri[order, 0], dtype=np.float64)
    e2 = np.ascontiguousarray(tri[order, 2] - tri[order, 0], dtype=np.float64)
    return nodes, TriangleSoup(p0, e1, e2), order


class TriangleMesh:
    """Immutable triangle mesh with lazy BVH acceleration."""

    def __init__(self, vertices, faces, normals=None, uvs=None):
        self.vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(faces, dtype=np.int32).reshape(-1, 3)
        if len(self.faces) < 1:
            raise ValueError("mesh needs at least one triangle")
        if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
            raise ValueError("face indices out of range")
        self.normals = (
            np.asarray(normals, dtype=np.float64).reshape(-1, 3)
            if normals is not None
            else self._smooth_normals()
        )
        self.uvs = uvs
        self._accel = None

    def _smooth_normals(self):
        v = self.vertices
        f = self.faces
        fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        vn = np.zeros_like(v)
        for c in range(3):
            np.add.at(vn, f[:, c], fn)
        return normalize(vn)

    @property
    def accel(self):
        if self._accel is None:
            self._accel = build_bvh(self.vertices, self.faces)
        return self._accel

    def bounding_sphere(self):
        """(center, radius): box center, max vertex distance."""
        c = 0.5 * (self.vertices.min(axis=0) + self.vertices.max(axis=0))
        r = float(np.linalg.norm(self.vertices - c, axis=1).max())
        return c, r

    def transformed(self, rotation=None, translation=None, scale=1.0):
        r = np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64)
        t = np.zeros(3) if translation is None else np.asarray(translation, dtype=np.float64)
        if scale <= 0:
            raise ValueError("scale must be positive")
        v = (self.vertices * scale) @ r.T + t
        n = normalize(self.normals @ r.T)
        return TriangleMesh(v, self.faces, n, self.uvs)

    # -- ray queries (kernel-backed)

    def ray_hits(self, origins, dirs, t_min=1e-9, t_max=np.inf):
        """(t, tri_index) of nearest hits; t=inf and index=-1 on miss.

        tri_index refers to BVH order; use hit_normals for interpolation.
        """
        nodes, soup, _ = self.accel
        return kernels.mesh_hit(nodes, soup, origins, dirs, t_min, t_max)

    def ray_any(self, origins, dirs, t_min=1e-9, t_max=np.inf):
        nodes, soup, _ = self.accel
        return kernels.mesh_any(nodes, soup, origins, dirs, t_min, t_max)

    def hit_normals(self, origins, dirs, t, tri_index):
        """Smooth normals at hit points (barycentric-interpolated)."""
        nodes, soup, order = self.accel
        hit = tri_index >= 0
        out = np.zeros((len(t), 3))
        if not np.any(hit):
            return out
        ti = tri_index[hit]
        pts = origins[hit] + dirs[hit] * t[hit][:, None]
        p0 = soup.p0[ti]
        e1 = soup.e1[ti]
        e2 = soup.e2[ti]
        # barycentrics by projecting onto the triangle frame
        d00 = np.sum(e1 * e1, axis=1)
        d01 = np.sum(e1 * e2, axis=1)
        d11 = np.sum(e2 * e2, axis=1)
        dp = pts - p0
        d20 = np.sum(dp * e1, axis=1)
        d21 = np.sum(dp * e2, axis=1)
        den = np.maximum(d00 * d11 - d01 * d01, 1e-300)
        u = (d11 * d20 - d01 * d21) / den
        v = (d00 * d21 - d01 * d20) / den
        w = 1.0 - u - v
        fidx = self.faces[order[ti]]
        n = (
            w[:, None] * self.normals[fidx[:, 0]]
            + u[:, None] * self.normals[fidx[:, 1]]
            + v[:, None] * self.normals[fidx[:, 2]]
        )
        out[hit] = normalize(n)
        return out

    def contains(self, points, max_crossings=128):
        """Inside test by ray-crossing parity along +x (closed meshes)."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        n = len(points)
        d = np.tile(np.array([[1.0, 0.0, 0.0]]), (n, 1))
        origins = points.copy()
        crossings = np.zeros(n, dtype=np.int64)
        active = np.ones(n, dtype=bool)
        for _ in range(max_crossings):
            if not np.any(active):
                break
            t, _idx = self.ray_hits(origins[active], d[active])
            hit = np.isfinite(t)
            ai = np.where(active)[0]
            crossings[ai[hit]] += 1
            origins[ai[hit]] += d[0] * (t[hit] + 1e-9)[:, None]
            still = np.zeros(n, dtype=bool)
            still[ai[hit]] = True
            active = still
        return (crossings % 2) == 1


# ---------------------------------------------------------------------------
# Wavefront OBJ


def load_obj(path):
    verts, norms, uvs = [], [], []
    fv, fn = [], []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif tag == "vn":
                norms.append([float(x) for x in parts[1:4]])
            elif tag == "vt":
                uvs.append([float(x) for x in parts[1:3]])
            elif tag == "f":
                refs = []
                for tok in parts[1:]:
                    comps = tok.split("/")
                    vi = int(comps[0])
                    vi = vi - 1 if vi > 0 else len(verts) + vi
                    ni = -1
                    if len(comps) == 3 and comps[2]:
                        raw = int(comps[2])
                        ni = raw - 1 if raw > 0 else len(norms) + raw
                    refs.append((vi, ni))
                for k in range(1, len(refs) - 1):  # fan triangulation
                    fv.append([refs[0][0], refs[k][0], refs[k + 1][0]])
                    fn.append([refs[0][1], refs[k][1], refs[k + 1][1]])
    if not verts or not fv:
        raise ValueError(f"no geometry in OBJ file {path!r}")
    vertices = np.asarray(verts, dtype=np.float64)
    faces = np.asarray(fv, dtype=np.int32)
    normals = None
    fn = np.asarray(fn, dtype=np.int64)
    if len(norms) and np.all(fn >= 0):
        # per-vertex normals: average the referenced vn over incident faces
        acc = np.zeros_like(vertices)
        cnt = np.zeros(len(vertices))
        nsrc = np.asarray(norms, dtype=np.float64)
        for c in range(3):
            np.add.at(acc, faces[:, c], nsrc[fn[:, c]])
            np.add.at(cnt, faces[:, c], 1.0)
        normals = normalize(acc / np.maximum(cnt[:, None], 1.0))
    return TriangleMesh(vertices, faces, normals)


def save_obj(mesh, path):
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for n in mesh.normals:
            f.write(f"vn {n[0]:.9g} {n[1]:.9g} {n[2]:.9g}\n")
        for tri in mesh.faces:
            a, b, c = (int(i) + 1 for i in tri)
            f.write(f"f {a}//{a} {b}//{b} {c}//{c}\n")


# ---------------------------------------------------------------------------
# Procedural shapes


def icosphere(subdivisions=3, radius=1.0):
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    verts = normalize(verts)
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [tuple(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}
        vlist = list(verts)

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = normalize(0.5 * (np.array(vlist[a]) + np.array(vlist[b])))
                cache[key] = len(vlist)
                vlist.append(tuple(m))
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
        verts = vlist
    v = np.asarray(verts, dtype=np.float64) * radius
    mesh = TriangleMesh(v, np.asarray(faces, dtype=np.int32), normals=normalize(v))
    return mesh


def blob(subdivisions=3, radius=1.0, bump=0.25, seed=3):
    """Irregular closed mesh: icosphere with smooth low-frequency radial bumps."""
    base = icosphere(subdivisions, 1.0)
    v = base.vertices
    x, y, z = v[:, 0], v[:, 1], v[:, 2]
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.5, 1.0, 4)
    r = 1.0 + bump * (
        a[0] * np.sin(3.1 * x + 0.7) * np.cos(2.3 * y)
        + a[1] * np.sin(2.7 * y * z)
        + a[2] * np.cos(3.7 * z + 1.3) * np.sin(1.9 * x)
        + a[3] * np.sin(2.2 * x * y + 0.4)
    ) / 3.0
    return TriangleMesh(v * (radius * r[:, None]), base.faces)
