import numpy as np
import pytest
from scipy.integrate import quad

from sginsert.fh import FhTable, build_fh
from sginsert.quadrature import sg_halfspace_integral


def quad_halfspace_oracle(theta, lam):
    """Independent oracle: adaptive quadrature of the ring-reduced integrand.

    The tail piece [kink, 1] is integrated in v = lam (1 - u) so the adaptive
    rule sees a plain exponential decay; dark entries stay accurate.
    """
    st, ct = np.sin(theta), np.cos(theta)

    def frac(u):
        s = np.sqrt(max(1e-300, 1.0 - u * u))
        if ct > 1e-15:
            c0 = -u * st / max(s * ct, 1e-300)
        else:
            c0 = -np.inf if u * st > 0 else np.inf
        return np.arccos(np.clip(c0, -1.0, 1.0))

    kink = abs(ct)
    u_split = 1.0 - min(2.0, 60.0 / lam)
    body_pts = [p for p in (-kink, kink) if -1.0 < p < u_split]
    body, _ = quad(lambda u: np.exp(lam * (u - 1.0)) * frac(u), -1, u_split,
                   points=body_pts or None, limit=400)
    v_kink = lam * (1.0 - kink)
    v_max = lam * (1.0 - u_split)
    tail_pts = [v_kink] if 0.0 < v_kink < v_max else None
    tail, _ = quad(lambda v: np.exp(-v) * frac(1.0 - v / lam) / lam, 0.0, v_max,
                   points=tail_pts, limit=400)
    return 2.0 * (body + tail)


class TestBuild:
    def test_resolution_floor(self):
        with pytest.raises(ValueError):
            build_fh(8, 32)

    def test_monotone_in_theta(self, fh_table):
        assert np.all(np.diff(fh_table.values, axis=0) >= 0.0)

    def test_half_space_symmetry_identity(self, fh_table):
        # f_h(theta) + f_h(-theta) = full sphere integral
        full = 2 * np.pi * (1 - np.exp(-2 * fh_table.lambdas)) / fh_table.lambdas
        total = fh_table.values + fh_table.values[::-1]
        assert np.allclose(total, full[None, :], rtol=1e-6)

    def test_sharp_lobe_visible_hemisphere(self, fh_table):
        got = float(fh_table.lookup(np.pi / 2, 100.0))
        full = 2 * np.pi * (1 - np.exp(-200)) / 100.0
        assert abs(got - full) <= 0.01 * full

    def test_axis_on_boundary_half_mass(self, fh_table):
        r = float(fh_table.lookup(0.0, 1000.0) / fh_table.lookup(np.pi / 2, 1000.0))
        assert 0.49 <= r <= 0.51

    def test_fully_occluded_sharp_lobe(self, fh_table):
        num = float(fh_table.lookup(-np.pi / 2, 100.0))
        den = float(fh_table.lookup(np.pi / 2, 100.0))
        assert num <= 1e-3 * den

    def test_entries_vs_independent_quadrature(self):
        table = build_fh(24, 16)
        col_max = table.values.max(axis=0)
        rng = np.random.default_rng(0)
        idx = [(i, j) for i in range(24) for j in range(16)]
        for i, j in [idx[k] for k in rng.choice(len(idx), 80, replace=False)]:
            ref = quad_halfspace_oracle(table.thetas[i], table.lambdas[j])
            got = table.values[i, j]
            assert abs(got - ref) <= 0.005 * max(abs(ref), 1e-8 * col_max[j])


class TestLookup:
    def test_exact_nodes(self, fh_table):
        it, il = 37, 11
        got = float(fh_table.lookup(fh_table.thetas[it], fh_table.lambdas[il]))
        assert np.isclose(got, fh_table.values[it, il], rtol=1e-12)

    def test_theta_clamp(self, fh_table):
        for lam in (0.7, 55.0, 3000.0):
            assert fh_table.lookup(3.0, lam) == fh_table.lookup(np.pi / 2, lam)
            assert fh_table.lookup(-3.0, lam) == fh_table.lookup(-np.pi / 2, lam)

    def test_lambda_clamp(self, fh_table):
        assert fh_table.lookup(0.3, 1e-6) == fh_table.lookup(0.3, fh_table.lambdas[0])
        assert fh_table.lookup(0.3, 1e9) == fh_table.lookup(0.3, fh_table.lambdas[-1])

    def test_midpoints_vs_quadrature(self):
        # 1% relative accuracy down to one millionth of the lobe mass (below
        # that, values are numerically dark for every consumer)
        table = build_fh(1024, 160)
        rng = np.random.default_rng(1)
        for _ in range(120):
            theta = rng.uniform(-np.pi / 2, np.pi / 2)
            lam = np.exp(rng.uniform(np.log(1.0), np.log(1000.0)))
            got = float(table.lookup(theta, lam))
            ref = sg_halfspace_integral(theta, lam)
            scale = sg_halfspace_integral(np.pi / 2, lam)
            assert abs(got - ref) <= 0.01 * max(abs(ref), 1e-6 * scale)

    def test_batch_lookup_shape(self, fh_table):
        th = np.tile(np.linspace(-1, 1, 3)[:, None], (1, 4))
        lm = np.full((3, 4), 42.0)
        out = fh_table.lookup(th, lm)
        assert out.shape == (3, 4)
        assert np.all(np.diff(out, axis=1) == 0)  # theta constant per row
        assert np.all(np.diff(out, axis=0) > 0)


class TestPersistence:
    def test_roundtrip(self, tmp_path, fh_table):
        p = tmp_path / "t.fht"
        fh_table.save(p)
        back = FhTable.load(p)
        assert np.array_equal(back.thetas, fh_table.thetas)
        assert np.array_equal(back.lambdas, fh_table.lambdas)
        assert np.array_equal(back.values, fh_table.values)

    def test_magic(self, tmp_path):
        p = tmp_path / "bad.fht"
        p.write_bytes(b"XXXX")
        with pytest.raises(ValueError):
            FhTable.load(p)
