from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Schedule:
    """Sub-VP SDE with a linear noise scale xi(t) = xi_min + t (xi_max - xi_min).

    alpha_t = exp(-1/2 int_0^t xi),  sigma_t = 1 - exp(-int_0^t xi).
    """

    xi_min: float = 0.1
    xi_max: float = 20.0

    def _check(self, t):
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0.0) or np.any(t > 1.0) or not np.all(np.isfinite(t)):
            raise ValueError(f"diffusion time must lie in [0, 1], got {t}")
        return t

    def xi(self, t):
        t = self._check(t)
        return self.xi_min + t * (self.xi_max - self.xi_min)

    def integral(self, t):
        t = self._check(t)
        return self.xi_min * t + 0.5 * (self.xi_max - self.xi_min) * t * t

    def alpha(self, t):
        return np.exp(-0.5 * self.integral(t))

    def sigma(self, t):
        return -np.expm1(-self.integral(t))

    def diffusion_sq(self, t):
        """g(t)^2 of the forward SDE."""
        return self.xi(t) * -np.expm1(-2.0 * self.integral(t))


def schedule_eval(s: Schedule, t):
    """(alpha_t, sigma_t) at diffusion time ``t``."""
    return s.alpha(t), s.sigma(t)


def perturb(s: Schedule, x0, t, eps):
    """x_t = alpha_t x0 + sigma_t eps; ``t`` may be a scalar or one value per row."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 {x0.shape} and eps {eps.shape} differ in shape")
    a, sg = schedule_eval(s, t)
    a, sg = _col(a, x0), _col(sg, x0)
    return a * x0 + sg * eps


def _col(c, like):
    c = np.asarray(c)
    return c[..., None] if c.ndim and like.ndim > c.ndim else c
