import numpy as np

from sginsert.geom import (
    DirectionMap,
    angle_between,
    fibonacci_sphere,
    normalize,
    octa_decode,
    octa_encode,
    octa_solid_angles,
    octa_texel_centers,
    octa_texel_of,
    orthonormal_basis,
)


def test_octa_roundtrip_within_texel_radius():
    # every unit direction maps to exactly one texel and back within the
    # texel's angular radius (circumradius, measured densely per cell)
    res = 32
    rng = np.random.default_rng(0)
    d = rng.normal(size=(20000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    i, j = octa_texel_of(d, res)
    centers = octa_texel_centers(res)
    back = centers[i, j]
    err = angle_between(d, back)
    sub = np.linspace(0.0, 1.0, 9)
    su, sv = np.meshgrid(sub, sub, indexing="ij")
    cell = np.stack([su, sv], axis=-1).reshape(-1, 2)  # offsets within a cell
    base = np.stack(np.meshgrid(np.arange(res), np.arange(res), indexing="ij"), -1)
    uv = (base[:, :, None, :] + cell[None, None, :, :]) / res * 2.0 - 1.0
    pts = octa_decode(uv)
    radius = angle_between(pts, centers[:, :, None, :]).max(axis=-1)
    assert np.all(err <= radius[i, j] + 1e-12)


def test_octa_encode_decode_identity():
    rng = np.random.default_rng(1)
    d = rng.normal(size=(5000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    back = octa_decode(octa_encode(d))
    assert np.max(angle_between(d, back)) < 1e-7


def test_octa_solid_angles_sum_to_sphere():
    for res in (16, 64):
        sa = octa_solid_angles(res)
        assert abs(sa.sum() - 4 * np.pi) < 1e-9
        assert np.all(sa > 0)


def test_fibonacci_sphere_unit_and_spread():
    d = fibonacci_sphere(500)
    assert np.allclose(np.linalg.norm(d, axis=1), 1.0)
    # no two directions coincide
    dots = d @ d.T - np.eye(500)
    assert dots.max() < 0.9999


def test_orthonormal_basis():
    rng = np.random.default_rng(2)
    n = rng.normal(size=(100, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    t1, t2 = orthonormal_basis(n)
    for a, b in ((t1, t2), (t1, n), (t2, n)):
        assert np.abs(np.sum(a * b, axis=1)).max() < 1e-12
    assert np.allclose(np.linalg.norm(t1, axis=1), 1.0)
    assert np.allclose(np.cross(t1, t2), n)


def test_direction_map_lookup():
    dm = DirectionMap.filled(16, 2.5)
    rng = np.random.default_rng(3)
    d = rng.normal(size=(64, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    assert np.all(dm.lookup(d) == 2.5)
    vals = np.arange(16 * 16, dtype=float).reshape(16, 16)
    dm2 = DirectionMap(16, vals)
    centers = octa_texel_centers(16)
    assert np.array_equal(dm2.lookup(centers), vals)


def test_normalize_batch():
    v = np.array([[3.0, 0.0, 0.0], [0.0, 0.2, 0.0]])
    n = normalize(v)
    assert np.allclose(n, [[1, 0, 0], [0, 1, 0]])
