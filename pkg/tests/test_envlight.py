import numpy as np
import pytest

from sginsert.envlight import (
    AlbedoModel,
    EnvBudget,
    SceneUnsuitableError,
    env_energy,
    init_env_mixture,
    optimize_env,
    render_equirect,
    sample_surface_pixels,
    sample_views,
    trace_hemisphere,
)
from sginsert.field import VoxelRadianceField, gen_procedural
from sginsert.geom import cosine_sample_hemisphere
from sginsert.sg import SGLobe, SGMixture


def uniform_enclosure(radiance=0.8, n=48):
    dens = np.zeros((n, n, n))
    em = np.full((n, n, n, 3), radiance)
    c = (np.arange(n) + 0.5) / n * 2 - 1
    zz, yy, xx = np.meshgrid(c, c, c, indexing="ij")
    shell = (np.abs(xx) > 0.9) | (np.abs(yy) > 0.9) | (np.abs(zz) > 0.9)
    dens[shell] = 400.0
    return VoxelRadianceField(dens, em, [-1, -1, -1], [1, 1, 1])


def vacuum_field(n=16):
    return VoxelRadianceField(np.zeros((n, n, n)), np.zeros((n, n, n, 3)),
                              [-1, -1, -1], [1, 1, 1])


class TestSampleViews:
    def test_count_honored(self, box_room):
        views = sample_views(box_room, count=12, seed=0)
        assert len(views) == 12
        dist = 0.5 * float(np.max(box_room.extent))
        for v in views:
            assert np.isclose(np.linalg.norm(v.position - box_room.center), dist)

    def test_threshold_zero_accepts_everything(self, box_room):
        a = sample_views(box_room, count=8, quality_threshold=0.0, seed=1)
        b = sample_views(box_room, count=8, quality_threshold=0.0, seed=1)
        assert all(np.allclose(x.position, y.position) for x, y in zip(a, b))

    def test_vacuum_unsuitable(self):
        with pytest.raises(SceneUnsuitableError):
            sample_views(vacuum_field(), count=5, seed=0, max_trials=200)


class TestSampleSurfacePixels:
    def test_count_and_normals_on_wall(self, box_room):
        from sginsert.camera import Camera

        cam = Camera(np.array([0.0, 0.0, 0.0]), np.array([0.95, 0.0, 0.0]),
                     width=64, height=48)
        recs, flagged = sample_surface_pixels(box_room, cam, count=64, seed=2)
        assert not flagged
        assert len(recs) == 64
        for r in recs:
            ang = np.degrees(np.arccos(np.clip(r.normal @ np.array([-1.0, 0, 0]), -1, 1)))
            assert ang < 5.0

    def test_vacuum_empty_flagged(self):
        from sginsert.camera import Camera

        f = vacuum_field()
        cam = Camera(np.array([0.0, 0.0, 0.0]), np.array([1.0, 0.0, 0.0]),
                     width=16, height=12)
        recs, flagged = sample_surface_pixels(f, cam, count=8, seed=3)
        assert flagged
        assert recs == []


class TestTraceHemisphere:
    def test_uniform_enclosure_pi_l(self):
        f = uniform_enclosure(0.8)
        from sginsert.envlight import SurfacePointRecord

        rec = SurfacePointRecord(np.array([0.0, 0.0, -0.88]), np.array([0.0, 0.0, 1.0]),
                                 np.zeros(3))
        trace_hemisphere(f, rec, ray_count=32768, seed=4)
        assert rec.completed
        expected = np.pi * 0.8
        assert np.all(np.abs(rec.e_nerf - expected) <= 0.03 * expected)
        # enclosed: the upper hemisphere of the opacity map is ~1
        assert rec.opacity_map.values.min() > 0.98

    def test_opening_visible_in_opacity_map(self, open_room):
        from sginsert.envlight import SurfacePointRecord

        rec = SurfacePointRecord(np.array([-0.9, 0.0, 0.0]), np.array([1.0, 0.0, 0.0]),
                                 np.zeros(3))
        trace_hemisphere(open_room, rec, ray_count=16384, seed=5)
        toward = rec.opacity_map.lookup(np.array([[1.0, 0.0, 0.0]]))
        assert toward[0] <= 0.02

    def test_default_ray_count(self):
        import inspect

        sig = inspect.signature(trace_hemisphere)
        assert sig.parameters["ray_count"].default == 32768


def synth_records(field, true_env, albedo_rgb, n_views=10, n_px=12, rays=2048, seed=3):
    """Pipeline records with radiance synthesized from known ground truth."""
    views = sample_views(field, count=n_views, seed=seed)
    records = []
    for i, cam in enumerate(views):
        recs, _ = sample_surface_pixels(field, cam, count=n_px, seed=100 + i)
        records.extend(recs)
    rng = np.random.default_rng(7)
    for i, r in enumerate(records):
        trace_hemisphere(field, r, ray_count=rays, seed=1000 + i)
        dirs = cosine_sample_hemisphere(r.normal, rng.random(8192), rng.random(8192))
        oc = r.opacity_map.lookup(dirs)
        e_env = np.pi * np.mean((1 - oc)[:, None] * true_env.evaluate(dirs), axis=0)
        r.radiance = (albedo_rgb / np.pi) * (r.e_nerf + e_env)
    return records


class TestOptimizeEnv:
    def test_requires_completed_records(self, box_room):
        recs, _ = sample_surface_pixels(
            box_room,
            sample_views(box_room, count=1, seed=0)[0],
            count=4, seed=0,
        )
        init = init_env_mixture(8, 1.0)
        albedo = AlbedoModel(box_room.bbox_min, box_room.bbox_max)
        with pytest.raises(ValueError):
            optimize_env(recs, init, albedo, EnvBudget(iterations=1))

    def test_enerf_traced_exactly_once(self, box_room, monkeypatch):
        # optimization must never re-trace; records are completed up front
        import sginsert.envlight as ev

        recs = synth_records(box_room, SGMixture([]), np.full(3, 0.5),
                             n_views=2, n_px=4, rays=256)
        calls = {"n": 0}
        orig = ev.trace_hemisphere

        def counting(*a, **k):
            calls["n"] += 1
            return orig(*a, **k)

        monkeypatch.setattr(ev, "trace_hemisphere", counting)
        init = init_env_mixture(8, 1.0)
        albedo = AlbedoModel(box_room.bbox_min, box_room.bbox_max)
        optimize_env(recs, init, albedo, EnvBudget(iterations=3, samples_per_record=64))
        assert calls["n"] == 0

    def test_enclosed_room_stays_dark(self, box_room):
        recs = synth_records(box_room, SGMixture([]), np.full(3, 0.5),
                             n_views=8, n_px=8, rays=1024)
        scale = float(np.mean([r.e_nerf.mean() for r in recs]))
        init = init_env_mixture(32, scale, seed=0)
        albedo = AlbedoModel(box_room.bbox_min, box_room.bbox_max, hidden=12, freqs=2)
        est, _ = optimize_env(recs, init, albedo,
                              EnvBudget(iterations=60, samples_per_record=256, seed=0))
        assert env_energy(est.mixture).mean() <= 0.05 * scale

    def test_open_room_recovers_direction_and_energy(self, open_room):
        true_axis = np.array([1.0, 0.15, 0.1])
        true_axis /= np.linalg.norm(true_axis)
        true_env = SGMixture([SGLobe(true_axis, 30.0, np.array([9.0, 7.5, 6.0]))])
        recs = synth_records(open_room, true_env, np.array([0.55, 0.5, 0.45]),
                             n_views=16, n_px=16, rays=2048)
        scale = float(np.mean([r.e_nerf.mean() for r in recs]))
        init = init_env_mixture(32, scale, seed=0)
        albedo = AlbedoModel(open_room.bbox_min, open_room.bbox_max, hidden=12, freqs=2)
        est, albedo = optimize_env(recs, init, albedo, EnvBudget(iterations=160, seed=0))
        p, lam, mu = est.mixture.arrays()
        energies = mu.mean(axis=1) * 2 * np.pi * (1 - np.exp(-2 * lam)) / lam
        k = int(np.argmax(energies))
        ang = np.degrees(np.arccos(np.clip(p[k] @ true_axis, -1, 1)))
        assert ang <= 10.0
        # 256 records constrain the energy loosely; the acceptance suite
        # asserts the tight bound at the full 100-view protocol
        ratio = env_energy(est.mixture).mean() / env_energy(true_env).mean()
        assert abs(ratio - 1.0) <= 0.45

    def test_ground_truth_init_fixed_point(self, open_room):
        true_axis = np.array([0.9, 0.3, 0.3])
        true_axis /= np.linalg.norm(true_axis)
        true_env = SGMixture([SGLobe(true_axis, 20.0, np.array([4.0, 4.0, 4.0]))])
        a_true = np.full(3, 0.5)
        recs = synth_records(open_room, true_env, a_true, n_views=6, n_px=8, rays=1024)
        # init: the exact generating mixture padded with dark lobes, and an
        # albedo model pre-fit to the constant truth
        scale = float(np.mean([r.e_nerf.mean() for r in recs]))
        pad = init_env_mixture(32, scale * 1e-4, seed=1)
        lobes = [true_env.lobes[0]] + pad.lobes[1:]
        init = SGMixture(lobes)
        albedo = AlbedoModel(open_room.bbox_min, open_room.bbox_max, hidden=12, freqs=2, seed=0)
        xs = np.stack([r.position for r in recs])
        for _ in range(300):
            a, cache = albedo._forward(xs)
            g = albedo.backward(cache, 2 * (a - a_true))
            for k2 in albedo.params:
                albedo.params[k2] -= 0.02 * g[k2] / (np.abs(g[k2]).max() + 1e-9)
        from sginsert.envlight import env_loss

        l_init = env_loss(recs, init, albedo, samples=4096, seed=99)
        budget = EnvBudget(iterations=25, seed=0)
        est, albedo = optimize_env(recs, init, albedo, budget)
        l_final = env_loss(recs, est.mixture, albedo, samples=4096, seed=99)
        assert l_final <= l_init * 1.02

    def test_underdetermined_flag(self):
        from sginsert.envlight import SurfacePointRecord
        from sginsert.geom import DirectionMap

        recs = []
        rng = np.random.default_rng(0)
        for i in range(8):
            r = SurfacePointRecord(rng.uniform(-1, 1, 3),
                                   np.array([0.0, 0.0, 1.0]), np.zeros(3))
            r.e_nerf = np.zeros(3)
            r.opacity_map = DirectionMap.filled(16, 1.0)
            recs.append(r)
        init = init_env_mixture(8, 1.0)
        albedo = AlbedoModel(np.array([-1.0] * 3), np.array([1.0] * 3))
        est, _ = optimize_env(recs, init, albedo,
                              EnvBudget(iterations=2, samples_per_record=32))
        assert est.underdetermined


class TestAlbedoModel:
    def test_output_range(self):
        m = AlbedoModel(np.array([-1.0] * 3), np.array([1.0] * 3), seed=0)
        rng = np.random.default_rng(1)
        a = m.evaluate(rng.uniform(-1, 1, (500, 3)))
        assert np.all(a > 0.0099) and np.all(a < 0.9901)

    def test_gradient_matches_finite_differences(self):
        m = AlbedoModel(np.array([-1.0] * 3), np.array([1.0] * 3), hidden=6, freqs=1, seed=2)
        x = np.random.default_rng(3).uniform(-1, 1, (5, 3))
        target = np.full((5, 3), 0.3)
        a, cache = m._forward(x)
        g = m.backward(cache, 2 * (a - target))
        eps = 1e-6
        for key in ("w3", "b1"):
            flat = m.params[key]
            idx = (0,) if flat.ndim == 1 else (0, 0)
            orig = flat[idx]
            flat[idx] = orig + eps
            lp = np.sum((m.evaluate(x) - target) ** 2)
            flat[idx] = orig - eps
            lm = np.sum((m.evaluate(x) - target) ** 2)
            flat[idx] = orig
            fd = (lp - lm) / (2 * eps)
            assert np.isclose(g[key][idx], fd, rtol=1e-4, atol=1e-9)


def test_render_equirect_matches_eval():
    mix = SGMixture([SGLobe(np.array([0.0, 0.0, 1.0]), 5.0, np.array([1.0, 2.0, 3.0]))])
    img = render_equirect(mix, width=64, height=32)
    assert img.shape == (32, 64, 3)
    # top row looks straight up: close to the lobe amplitude
    assert np.all(np.abs(img[0].mean(axis=0) / np.array([1, 2, 3]) - 1) < 0.05)
