"""Weighted least-squares fitting of SG mixtures to directional radiance samples.

Damped Gauss-Newton on (log lambda, log mu, raw axis renormalized each step);
steps are accepted only when the weighted loss strictly decreases, so the loss
trace is monotone by construction and the accepted-step count is the budget
currency (warm starts finish in a few steps, cold starts in tens).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import fibonacci_sphere, normalize
from .sg import SGMixture

_LOG_FLOOR = np.log(1e-12)
_LOGLAM_MIN, _LOGLAM_MAX = np.log(1e-3), np.log(1e6)


@dataclass
class FitBudget:
    max_iters: int = 60
    max_backtracks: int = 12
    rtol: float = 1e-5
    init_damping: float = 1e-3
    lam_max: float = 1e4       # lobes narrower than any map texel only overfit
    mu_headroom: float = 10.0  # amplitude cap as a multiple of the data max


@dataclass
class FitResult:
    mixture: SGMixture
    loss_trace: list[float] = field(default_factory=list)
    accepted_steps: int = 0

    @property
    def final_loss(self):
        return self.loss_trace[-1]


def cold_start_mixture(dirs, radiance, count):
    """Fibonacci axes, sharpness count/2, amplitude from the nearest sample."""
    axes = fibonacci_sphere(count)
    dirs = np.asarray(dirs, dtype=np.float64)
    radiance = np.asarray(radiance, dtype=np.float64)
    nearest = np.argmax(axes @ dirs.T, axis=1)
    mu = np.maximum(radiance[nearest], 1e-8)
    lam = np.full(count, count / 2.0)
    return SGMixture.from_arrays(axes, lam, mu)


def _pack(mix):
    p, lam, mu = mix.arrays()
    return p.copy(), np.log(lam), np.log(np.maximum(mu, 1e-12))


def _unpack(p, loglam, logmu):
    return SGMixture.from_arrays(
        normalize(p),
        np.exp(np.clip(loglam, _LOGLAM_MIN, _LOGLAM_MAX)),
        np.exp(np.clip(logmu, _LOG_FLOOR, 50.0)),
    )


def _loss_and_model(p, loglam, logmu, dirs, rgb, w, loglam_max=_LOGLAM_MAX,
                    logmu_max=50.0):
    lam = np.exp(np.clip(loglam, _LOGLAM_MIN, loglam_max))
    mu = np.exp(np.clip(logmu, _LOG_FLOOR, logmu_max))
    pn = normalize(p)
    dots = dirs @ pn.T                       # (N, M)
    g = np.exp(lam[None, :] * (dots - 1.0))  # (N, M)
    model = g @ mu                           # (N, 3)
    resid = model - rgb
    loss = float(np.sum(w[:, None] * resid * resid))
    return loss, g, dots, resid, pn, lam, mu


def fit_mixture(dirs, rgb, weights, init, budget=None):
    """Fit an M-lobe mixture to (dirs, rgb) samples with per-sample weights.

    Returns a FitResult whose mixture never has a higher weighted loss than
    init.  Requires at least one sample per lobe.
    """
    budget = budget or FitBudget()
    dirs = np.asarray(dirs, dtype=np.float64)
    rgb = np.asarray(rgb, dtype=np.float64)
    if dirs.size == 0:
        raise ValueError("fit_mixture needs at least one sample")
    if weights is None:
        weights = np.ones(len(dirs))
    w = np.asarray(weights, dtype=np.float64)
    m = init.count
    if len(dirs) < m:
        raise ValueError(f"need at least {m} samples to fit {m} lobes")

    p, loglam, logmu = _pack(init)
    n = len(dirs)
    loglam_max = np.log(budget.lam_max)
    logmu_max = np.log(budget.mu_headroom * max(float(rgb.max()), 1e-6))
    bounds = dict(loglam_max=loglam_max, logmu_max=logmu_max)
    loss, g, dots, resid, pn, lam, mu = _loss_and_model(p, loglam, logmu, dirs, rgb, w, **bounds)
    trace = [loss]
    accepted = 0
    damping = budget.init_damping

    n_params = 7 * m
    for _ in range(budget.max_iters):
        # Jacobian of sqrt(w)-weighted residuals, (3N, 7M); params are
        # [u_k (3), log lambda_k, log mu_k (3)] per lobe.
        sw = np.sqrt(w)
        jac = np.zeros((3 * n, n_params))
        rvec = (resid * sw[:, None]).T.reshape(-1)  # channel-major (3N,)
        for k in range(m):
            base = 7 * k
            gk = g[:, k]                                        # (N,)
            proj = dirs - dots[:, k][:, None] * pn[k][None, :]  # (I - pp^T) d
            daxis = gk[:, None] * proj * lam[k]                 # (N, 3)
            dlog = gk * lam[k] * (dots[:, k] - 1.0)             # (N,)
            for c in range(3):
                rows = slice(c * n, (c + 1) * n)
                jac[rows, base : base + 3] = mu[k, c] * daxis * sw[:, None]
                jac[rows, base + 3] = mu[k, c] * dlog * sw
                jac[rows, base + 4 + c] = mu[k, c] * gk * sw

        grad = jac.T @ rvec
        hess = jac.T @ jac
        diag = np.diag(hess).copy()
        diag[diag < 1e-12] = 1e-12

        step = None
        for _try in range(budget.max_backtracks):
            try:
                delta = np.linalg.solve(hess + damping * np.diag(diag), -grad)
            except np.linalg.LinAlgError:
                damping *= 4.0
                continue
            cp = p.copy()
            cl = loglam.copy()
            cm = logmu.copy()
            for k in range(m):
                base = 7 * k
                cp[k] = pn[k] + delta[base : base + 3]
                cl[k] = loglam[k] + delta[base + 3]
                cm[k] = logmu[k] + delta[base + 4 : base + 7]
            cand = _loss_and_model(cp, cl, cm, dirs, rgb, w, **bounds)
            if cand[0] < loss:
                step = (cp, cl, cm, cand)
                damping = max(damping / 6.0, 1e-10)
                break
            damping *= 5.0
        if step is None:
            break
        p, loglam, logmu = step[0], step[1], step[2]
        prev = loss
        loss, g, dots, resid, pn, lam, mu = step[3]
        trace.append(loss)
        accepted += 1
        if prev - loss <= budget.rtol * max(prev, 1e-300):
            break

    return FitResult(
        _unpack(np.asarray(p), np.clip(loglam, _LOGLAM_MIN, loglam_max),
                np.clip(logmu, _LOG_FLOOR, logmu_max)),
        trace, accepted,
    )
