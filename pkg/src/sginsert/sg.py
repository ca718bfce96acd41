"""Spherical Gaussian algebra: lobes, closed-form integrals, products, shading.

A lobe is G(d) = mu * exp(lambda * (d.p - 1)) with unit axis p, sharpness
lambda > 0 and RGB amplitude mu >= 0.  Products of lobes are lobes again,
which is what makes the shading path (light x BRDF x cosine) cheap.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .geom import check_unit, fibonacci_sphere, normalize, reflect
from .quadrature import sg_cosine_integral, sg_cosine_integral_many


@dataclass(frozen=True)
class SGLobe:
    axis: np.ndarray       # unit 3-vector
    sharpness: float       # > 0
    amplitude: np.ndarray  # RGB, each >= 0

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=np.float64).reshape(3)
        n = np.linalg.norm(axis)
        if abs(n - 1.0) > 1e-6:
            raise ValueError("lobe axis must be unit length")
        amp = np.asarray(self.amplitude, dtype=np.float64)
        if amp.ndim == 0:
            amp = np.full(3, float(amp))
        amp = amp.reshape(3)
        if not float(self.sharpness) > 0.0:
            raise ValueError("lobe sharpness must be positive")
        if np.any(amp < 0.0):
            raise ValueError("lobe amplitude must be non-negative")
        object.__setattr__(self, "axis", axis / n)
        object.__setattr__(self, "sharpness", float(self.sharpness))
        object.__setattr__(self, "amplitude", amp)

    def scaled(self, k):
        k = np.asarray(k, dtype=np.float64)
        return SGLobe(self.axis, self.sharpness, self.amplitude * k)


@dataclass
class SGMixture:
    lobes: list[SGLobe] = field(default_factory=list)

    @property
    def count(self):
        return len(self.lobes)

    @classmethod
    def from_arrays(cls, axes, sharpness, amplitudes):
        axes = np.asarray(axes, dtype=np.float64)
        sharpness = np.asarray(sharpness, dtype=np.float64)
        amplitudes = np.asarray(amplitudes, dtype=np.float64)
        return cls([SGLobe(a, l, m) for a, l, m in zip(axes, sharpness, amplitudes)])

    def arrays(self):
        """(axes (M,3), sharpness (M,), amplitudes (M,3))."""
        if not self.lobes:
            return np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3))
        return (
            np.stack([l.axis for l in self.lobes]),
            np.array([l.sharpness for l in self.lobes]),
            np.stack([l.amplitude for l in self.lobes]),
        )

    def evaluate(self, dirs):
        """Sum of lobe evaluations at unit directions dirs (..., 3) -> (..., 3)."""
        p, lam, mu = self.arrays()
        d = np.asarray(dirs, dtype=np.float64)
        dots = d @ p.T                                   # (..., M)
        g = np.exp(lam * (dots - 1.0))                   # (..., M)
        return g @ mu                                    # (..., 3)

    def total_energy(self):
        """Sum over lobes of the closed-form sphere integral (RGB)."""
        total = np.zeros(3)
        for l in self.lobes:
            total += sphere_integral(l)
        return total

    # -- text serialization: header "SGMIX <M>", one "px py pz lambda mur mug mub" per line

    def to_text(self):
        out = io.StringIO()
        out.write(f"SGMIX {self.count}\n")
        for l in self.lobes:
            vals = [*l.axis, l.sharpness, *l.amplitude]
            out.write(" ".join(f"{v:.12g}" for v in vals) + "\n")
        return out.getvalue()

    @classmethod
    def from_text(cls, text):
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("SGMIX"):
            raise ValueError("not an SGMIX stream (missing header)")
        m = int(lines[0].split()[1])
        if len(lines) - 1 < m:
            raise ValueError(f"SGMIX header promises {m} lobes, found {len(lines) - 1}")
        lobes = []
        for ln in lines[1 : 1 + m]:
            v = [float(x) for x in ln.split()]
            if len(v) != 7:
                raise ValueError("SGMIX lobe line must have 7 fields")
            lobes.append(SGLobe(normalize(np.array(v[:3])), v[3], np.array(v[4:7])))
        return cls(lobes)

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_text())

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_text(f.read())


@dataclass(frozen=True)
class BRDFParams:
    """Simplified Disney parameters; F0 is fixed by the model."""

    roughness: float = 0.5
    metallic: float = 0.0
    albedo: np.ndarray = None

    F0 = 0.02

    def __post_init__(self):
        alb = self.albedo if self.albedo is not None else np.array([0.8, 0.8, 0.8])
        alb = np.clip(np.asarray(alb, dtype=np.float64).reshape(3), 0.0, 1.0)
        object.__setattr__(self, "albedo", alb)
        if not 0.0 <= self.roughness <= 1.0:
            raise ValueError("roughness must be in [0,1]")
        if not 0.0 <= self.metallic <= 1.0:
            raise ValueError("metallic must be in [0,1]")

    def f0_rgb(self):
        return self.F0 * (1.0 - self.metallic) + self.albedo * self.metallic

    def diffuse_rgb(self):
        return self.albedo * (1.0 - self.metallic)


# ---------------------------------------------------------------------------
# Closed forms


def evaluate(lobe, d):
    """G(d) = mu * exp(lambda (d.p - 1)); d must be unit."""
    d = check_unit(d)
    return lobe.amplitude * np.exp(lobe.sharpness * (float(d @ lobe.axis) - 1.0))


def sphere_integral(lobe):
    """Closed form mu * 2 pi (1 - e^(-2 lambda)) / lambda."""
    lam = lobe.sharpness
    return lobe.amplitude * (2.0 * np.pi * (1.0 - np.exp(-2.0 * lam)) / lam)


def product(l1, l2):
    """Pointwise product of two lobes, itself a lobe (exact).

    Antipodal equal-sharpness axes make the product a constant ~e^(-2 lambda);
    that degenerate case collapses to a zero-amplitude lobe.
    """
    v = l1.sharpness * l1.axis + l2.sharpness * l2.axis
    lam = float(np.linalg.norm(v))
    if lam < 1e-12:
        return SGLobe(l1.axis, max(l1.sharpness, l2.sharpness), np.zeros(3))
    mu = l1.amplitude * l2.amplitude * np.exp(lam - l1.sharpness - l2.sharpness)
    return SGLobe(v / lam, lam, mu)


def inner_product(l1, l2):
    """Integral of G1*G2 over the sphere = sphere_integral(product)."""
    return sphere_integral(product(l1, l2))


# ---------------------------------------------------------------------------
# Clamped-cosine lobe (single SG), constants fitted once per process


_COS_CONSTANTS = None


def fit_cosine_constants(n_samples=10000):
    """Least-squares (lambda, mu) for a single SG approximating max(d.n, 0).

    The search is constrained to the quality envelope the lobe must satisfy
    (hemisphere integral = pi by construction via mu(lambda); full-sphere
    integral within 4.5% of pi; value at 90 degrees <= 0.095); within that
    set the L2 error over equal-area sphere samples is minimized.  The
    unconstrained optimum (~lambda 2.14) leaks too much past the horizon.
    """
    t = fibonacci_sphere(n_samples)[:, 2]
    target = np.maximum(t, 0.0)
    best = None
    for lam in np.linspace(1.0, 12.0, 4401):
        mu = lam / (2.0 * (1.0 - np.exp(-lam)))  # hemisphere integral == pi
        if 1.0 + np.exp(-lam) > 1.045 or mu * np.exp(-lam) > 0.095:
            continue
        err = float(np.mean((mu * np.exp(lam * (t - 1.0)) - target) ** 2))
        if best is None or err < best[0]:
            best = (err, lam, mu)
    return best[1], best[2]


def cosine_lobe(n):
    """Single-SG approximation of the clamped cosine about unit n."""
    n = check_unit(n)
    global _COS_CONSTANTS
    if _COS_CONSTANTS is None:
        _COS_CONSTANTS = fit_cosine_constants()
    lam, mu = _COS_CONSTANTS
    return SGLobe(n, lam, np.full(3, mu))


# ---------------------------------------------------------------------------
# SG x clamped-cosine integral ("irradiance") table


class SGIrradianceTable:
    """E(cos beta, lambda) = integral of exp(lambda(d.p-1)) max(d.n, 0) dd.

    Bilinear in (cos beta, log lambda); beyond lambda_max the integrand scales
    like 1/lambda at fixed beta, which the lookup extrapolates.
    """

    LAM_MIN, LAM_MAX = 1e-2, 2e4

    def __init__(self, n_cos=161, n_lam=121):
        self.cosb = np.linspace(-1.0, 1.0, n_cos)
        self.loglam = np.linspace(np.log(self.LAM_MIN), np.log(self.LAM_MAX), n_lam)
        lams = np.exp(self.loglam)
        self.values = np.stack(
            [sg_cosine_integral_many(self.cosb, lam) for lam in lams], axis=1
        )  # (n_cos, n_lam)

    def lookup(self, cosb, lam):
        cosb = np.clip(np.asarray(cosb, dtype=np.float64), -1.0, 1.0)
        lam = np.asarray(lam, dtype=np.float64)
        scale = np.where(lam > self.LAM_MAX, self.LAM_MAX / np.maximum(lam, 1e-300), 1.0)
        ll = np.clip(np.log(np.clip(lam, self.LAM_MIN, self.LAM_MAX)),
                     self.loglam[0], self.loglam[-1])
        fc = (cosb - self.cosb[0]) / (self.cosb[1] - self.cosb[0])
        fl = (ll - self.loglam[0]) / (self.loglam[1] - self.loglam[0])
        ic = np.clip(fc.astype(np.int64), 0, len(self.cosb) - 2)
        il = np.clip(fl.astype(np.int64), 0, len(self.loglam) - 2)
        tc = fc - ic
        tl = fl - il
        v = (
            self.values[ic, il] * (1 - tc) * (1 - tl)
            + self.values[ic + 1, il] * tc * (1 - tl)
            + self.values[ic, il + 1] * (1 - tc) * tl
            + self.values[ic + 1, il + 1] * tc * tl
        )
        return v * scale


_IRR_TABLE = None


def irradiance_table():
    global _IRR_TABLE
    if _IRR_TABLE is None:
        _IRR_TABLE = SGIrradianceTable()
    return _IRR_TABLE


def irradiance(lobe, n):
    """Integral of G(d) * max(d.n, 0) over the sphere (RGB, table-backed)."""
    n = check_unit(n)
    cosb = float(np.clip(lobe.axis @ n, -1.0, 1.0))
    return lobe.amplitude * float(irradiance_table().lookup(cosb, lobe.sharpness))


def irradiance_exact(lobe, n):
    """Direct quadrature; slow, for tests and table validation."""
    cosb = float(np.clip(lobe.axis @ np.asarray(n, dtype=np.float64), -1.0, 1.0))
    return lobe.amplitude * sg_cosine_integral(cosb, lobe.sharpness)


# ---------------------------------------------------------------------------
# BRDF lobes and shading


def specular_lobe(omega_o, n, brdf, eps=1e-4):
    """Warped GGX NDF as a single SG on the incident domain.

    Axis is the mirror reflection of the view; sharpness (2/alpha^2)/(4 n.v);
    amplitude is the NDF peak 1/(pi alpha^2) scaled by Fresnel (Schlick about
    the mixed F0) and Smith geometry at the dominant direction.  Returns
    (lobe, grazing_flag); the flag marks clamped-sharpness grazing views.
    """
    omega_o = check_unit(omega_o)
    n = check_unit(n)
    ndv = float(n @ omega_o)
    if ndv <= 0.0:
        raise ValueError("specular_lobe requires omega_o on the outside (n.omega_o > 0)")
    grazing = ndv <= eps
    ndv_c = max(ndv, eps)
    alpha = max(brdf.roughness ** 2, 1e-3)
    lam_ndf = 2.0 / alpha ** 2
    axis = normalize(reflect(-omega_o, n))
    lam = lam_ndf / (4.0 * ndv_c)
    ndl = max(float(n @ axis), eps)
    h = normalize(axis + omega_o)
    vdh = float(np.clip(omega_o @ h, 0.0, 1.0))
    f0 = brdf.f0_rgb()
    fresnel = f0 + (1.0 - f0) * (1.0 - vdh) ** 5
    k = (brdf.roughness + 1.0) ** 2 / 8.0
    g1 = lambda c: c / (c * (1.0 - k) + k)
    geom = g1(ndl) * g1(ndv_c)
    mu = (1.0 / (np.pi * alpha ** 2)) * fresnel * geom / (4.0 * ndl * ndv_c)
    return SGLobe(axis, lam, mu), grazing


def shade_point(light, gamma, brdf, n, omega_o):
    """Outgoing radiance at a point lit by an SG mixture (Disney-simplified).

    gamma holds per-lobe self-shadow factors in [0,1].  Each lobe is scaled by
    gamma_k, multiplied by the specular SG, and integrated against the clamped
    cosine; the diffuse term integrates the scaled lobes against the cosine
    directly and multiplies by albedo/pi.
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.shape != (light.count,):
        raise ValueError("gamma length must equal the lobe count")
    n = check_unit(n)
    omega_o = check_unit(omega_o)
    out = shade_points_batch(light, gamma[None, :], brdf, n[None, :], omega_o[None, :])
    return out[0]


def shade_points_batch(light, gammas, brdf, normals, omega_os):
    """Vectorized shade_point over N points; gammas (N,M), normals/omega_os (N,3)."""
    p, lam, mu = light.arrays()
    normals = np.asarray(normals, dtype=np.float64)
    omega_os = np.asarray(omega_os, dtype=np.float64)
    gammas = np.asarray(gammas, dtype=np.float64)
    n_pts = normals.shape[0]
    if light.count == 0:
        return np.zeros((n_pts, 3))
    table = irradiance_table()

    # diffuse: albedo/pi * sum_k E(gamma_k lobe_k, n)
    cosb = np.clip(normals @ p.T, -1.0, 1.0)                       # (N, M)
    e_unit = table.lookup(cosb, lam[None, :])                      # (N, M)
    diff_w = (gammas * e_unit) @ mu                                # (N, 3)
    out = (brdf.diffuse_rgb() / np.pi)[None, :] * diff_w

    # specular: sum_k E((gamma_k lobe_k) x G_spec, n)
    ndv = np.clip(np.sum(normals * omega_os, axis=-1), 1e-4, 1.0)
    alpha = max(brdf.roughness ** 2, 1e-3)
    lam_ndf = 2.0 / alpha ** 2
    axes = normalize(2.0 * ndv[:, None] * normals - omega_os)      # reflect(-wo, n)
    lam_s = lam_ndf / (4.0 * ndv)                                  # (N,)
    ndl = np.clip(np.sum(normals * axes, axis=-1), 1e-4, 1.0)
    h = normalize(axes + omega_os)
    vdh = np.clip(np.sum(omega_os * h, axis=-1), 0.0, 1.0)
    f0 = brdf.f0_rgb()
    fres = f0[None, :] + (1.0 - f0)[None, :] * (1.0 - vdh[:, None]) ** 5
    k = (brdf.roughness + 1.0) ** 2 / 8.0
    g1 = lambda c: c / (c * (1.0 - k) + k)
    geom = g1(ndl) * g1(ndv)
    mu_s = (1.0 / (np.pi * alpha ** 2)) * fres * (geom / (4.0 * ndl * ndv))[:, None]

    v = lam[None, :, None] * p[None, :, :] + lam_s[:, None, None] * axes[:, None, :]
    lam3 = np.linalg.norm(v, axis=-1)                              # (N, M)
    safe = np.maximum(lam3, 1e-12)
    axis3 = v / safe[..., None]
    log_scale = lam3 - lam[None, :] - lam_s[:, None]               # <= 0 always
    cosb3 = np.clip(np.sum(axis3 * normals[:, None, :], axis=-1), -1.0, 1.0)
    e3 = table.lookup(cosb3, lam3) * np.exp(log_scale)             # (N, M)
    w = gammas * e3                                                # (N, M)
    spec = (w @ mu) * mu_s                                         # (N, 3)
    out = out + spec
    return np.maximum(out, 0.0)
