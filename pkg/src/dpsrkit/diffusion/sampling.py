"""Generation samplers and the one-step denoiser.

Every sampler uses the score -eps_hat / sigma_t of whatever model it is given;
a model is anything with ``predict(x_t, t)``, ``schedule``, ``dim`` and
``denormalize``.
"""
from __future__ import annotations

import numpy as np

from ..numerics import Rng
from .schedule import Schedule
from .training import NonFiniteLoss

T_EPS = 1e-3


class NonFiniteState(NonFiniteLoss):
    pass


def denoise_one_step(net, s: Schedule, x_t, t) -> np.ndarray:
    """x0_hat = (x_t - sigma_t eps_hat) / alpha_t, for t in (0, 1]."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr <= 0.0) or np.any(t_arr > 1.0):
        raise ValueError(f"one-step denoising needs t in (0, 1], got {t}")
    x_t = np.asarray(x_t, dtype=np.float64)
    a, sg = s.alpha(t_arr), s.sigma(t_arr)
    if a.ndim and x_t.ndim > a.ndim:
        a, sg = a[..., None], sg[..., None]
    return (x_t - sg * net.predict(x_t, t)) / a


def _check(x, step):
    if not np.all(np.isfinite(x)):
        raise NonFiniteState(step, detail="sampler state diverged")


def sample_em(net, s: Schedule, steps: int, rng: Rng, n: int = 1, t_end: float = T_EPS, denormalize: bool = True) -> np.ndarray:
    """Euler-Maruyama integration of the reverse sub-VP SDE from t=1 to ``t_end``.

    The last step returns the drift-only mean, without injected noise.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = rng.normal((n, net.dim))
    ts = np.linspace(1.0, t_end, steps + 1)
    for k in range(steps):
        t, dt = ts[k], ts[k] - ts[k + 1]
        score = -net.predict(x, t) / s.sigma(t)
        drift = -0.5 * s.xi(t) * x - s.diffusion_sq(t) * score
        x_mean = x - drift * dt
        if k == steps - 1:
            x = x_mean
        else:
            x = x_mean + np.sqrt(s.diffusion_sq(t) * dt) * rng.normal(x.shape)
        _check(x, k)
    return net.denormalize(x) if denormalize else x


def ddim_initial(net, s: Schedule, rng: Rng, n: int, start_t: float) -> np.ndarray:
    """Gaussian draw moment-matched to the marginal at ``start_t`` for unit-variance data."""
    a, sg = s.alpha(start_t), s.sigma(start_t)
    return np.sqrt(a * a + sg * sg) * rng.normal((n, net.dim))


def sample_ddim(
    net, s: Schedule, steps: int, rng: Rng, n: int = 1, start_t: float = 1.0, x_init=None, denormalize: bool = True
) -> np.ndarray:
    """Deterministic DDIM from ``start_t`` down to t=0 on a uniform time grid."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if not 0.0 < start_t <= 1.0:
        raise ValueError("start_t must lie in (0, 1]")
    x = ddim_initial(net, s, rng, n, start_t) if x_init is None else np.array(x_init, dtype=np.float64)
    ts = np.linspace(start_t, 0.0, steps + 1)
    for k in range(steps):
        t, u = ts[k], ts[k + 1]
        eps = net.predict(x, t)
        x0 = (x - s.sigma(t) * eps) / s.alpha(t)
        x = s.alpha(u) * x0 + s.sigma(u) * eps
        _check(x, k)
    return net.denormalize(x) if denormalize else x
