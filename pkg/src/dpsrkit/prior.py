"""Diffusion regularizer, timestep scheduling and the test-time optimization loop.

The optimization variable lives in normalized pose space.  A problem object
sees raw poses and returns per-row losses and gradients; rows are independent
hypotheses (or frames, for sequence problems whose loss couples rows).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .diffusion.sampling import T_EPS, denoise_one_step
from .diffusion.training import NonFiniteLoss
from .numerics import AdamState, Rng, adam_step

MODES = ("truncated", "uniform", "fixed", "random")

# Default [t_max, t_min] per task.
TASK_INTERVALS = {
    "motion": (0.2, 0.05),
    "completion": (0.15, 0.05),
    "ik": (0.15, 0.05),
    "fit2d": (0.12, 0.08),
}

# Default regularization weight and iteration budget per task.  Adam rescales each
# coordinate, so lam_reg mostly sets how far observed coordinates may yield to the prior.
TASK_LAM = {"motion": 0.1, "completion": 3e-3, "ik": 0.1, "fit2d": 0.1}
TASK_ITERS = {"motion": 500, "completion": 1000, "ik": 500, "fit2d": 500}


@dataclass
class SchedulePolicy:
    mode: str = "truncated"
    t_max: float = 0.15
    t_min: float = 0.05
    iters: int = 500

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown schedule mode {self.mode!r}; expected one of {MODES}")
        if self.mode == "uniform":
            # Uniform is truncated over the full usable range.
            self.t_max, self.t_min = 1.0, T_EPS
        if not 1.0 >= self.t_max >= self.t_min > 0.0:
            raise ValueError(f"need 1 >= t_max >= t_min > 0, got [{self.t_max}, {self.t_min}]")
        if self.mode == "fixed" and self.t_max != self.t_min:
            raise ValueError("fixed mode requires t_max == t_min")
        if self.iters < 1:
            raise ValueError("iters must be >= 1")

    @classmethod
    def for_task(cls, task: str, iters: int = 500, mode: str = "truncated") -> "SchedulePolicy":
        hi, lo = TASK_INTERVALS[task]
        if mode == "fixed":
            mid = 0.5 * (hi + lo)
            return cls("fixed", mid, mid, iters)
        if mode == "random":
            return cls("random", 1.0, T_EPS, iters)
        return cls(mode, hi, lo, iters)


def ablation_policies(task: str, iters: int) -> dict[str, SchedulePolicy]:
    return {m: SchedulePolicy.for_task(task, iters, m) for m in ("random", "fixed", "uniform", "truncated")}


def schedule_timestep(policy: SchedulePolicy, it: int, rng: Rng | None = None) -> float:
    if not 0 <= it < policy.iters:
        raise ValueError(f"iteration {it} outside [0, {policy.iters})")
    if policy.mode == "fixed":
        return policy.t_max
    if policy.mode == "random":
        if rng is None:
            raise ValueError("random scheduling needs an rng")
        return float(rng.uniform(None, policy.t_min, policy.t_max))
    if policy.iters == 1:
        return policy.t_max
    return policy.t_max - (policy.t_max - policy.t_min) * it / (policy.iters - 1)


@dataclass
class PriorConfig:
    lam_reg: float = 1.0
    w_t: float = 1.0
    lr: float = 0.05
    iters: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.lam_reg < 0 or self.w_t < 0:
            raise ValueError("lam_reg and w_t must be non-negative")
        if self.iters < 1:
            raise ValueError("iters must be >= 1")

    @classmethod
    def for_task(cls, task: str, **kw) -> "PriorConfig":
        kw.setdefault("lam_reg", TASK_LAM[task])
        kw.setdefault("iters", TASK_ITERS[task])
        return cls(**kw)


def _rows(rng, n: int) -> list[Rng]:
    if isinstance(rng, Rng):
        return [rng] if n == 1 else [rng.split(i) for i in range(n)]
    rngs = list(rng)
    if len(rngs) != n:
        raise ValueError(f"need one rng per row: {n} rows, {len(rngs)} rngs")
    return rngs


def dposer_loss_and_grad(net, s, x0, t, rng, w_t: float = 1.0, eps=None):
    """L = w_t ||x0 - sg[x0_hat(t)]||^2 per row, with its gradient in x0.

    ``x0`` is (d,) or (B, d) in normalized space; ``t`` is a scalar or one value
    per row; ``rng`` is one Rng or a sequence with one per row.  Returns
    (loss, grad, eps) with loss shaped like the row structure of x0.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    single = x0.ndim == 1
    xb = x0[None] if single else x0
    t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), xb.shape[:1]).copy()
    if np.any(t_arr <= 0.0) or np.any(t_arr > 1.0):
        raise ValueError("regularization needs t in (0, 1]")
    if eps is None:
        eps = np.stack([r.normal(xb.shape[1]) for r in _rows(rng, xb.shape[0])])
    eps = np.asarray(eps, dtype=np.float64).reshape(xb.shape)
    a, sg = s.alpha(t_arr)[:, None], s.sigma(t_arr)[:, None]
    x_t = a * xb + sg * eps
    x_hat = denoise_one_step(net, s, x_t, t_arr)
    if not np.all(np.isfinite(x_hat)):
        raise NonFiniteLoss(-1, t_arr, "network output is not finite")
    diff = xb - x_hat
    loss = w_t * np.sum(diff * diff, axis=-1)
    grad = 2.0 * w_t * diff
    if single:
        return float(loss[0]), grad[0], eps[0]
    return loss, grad, eps


class Problem(Protocol):
    def aux_init(self, n: int) -> dict[str, np.ndarray]: ...

    def loss_and_grad(self, pose: np.ndarray, aux: dict[str, np.ndarray]) -> tuple[np.ndarray, np.ndarray, dict[str, np.ndarray]]: ...


@dataclass
class OptimResult:
    x0: np.ndarray  # normalized, (B, d)
    pose: np.ndarray  # raw, (B, d)
    aux: dict[str, np.ndarray]
    t: np.ndarray  # (N, B)
    task_loss: np.ndarray  # (N, B)
    reg_loss: np.ndarray  # (N, B)
    final_task: np.ndarray  # (B,)
    lam_reg: float = 1.0

    @property
    def total_loss(self) -> np.ndarray:
        return self.task_loss + self.lam_reg * self.reg_loss

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "row", "t", "L_task", "L_DPoser", "L_total"])
            tot = self.total_loss
            for it in range(self.t.shape[0]):
                for b in range(self.t.shape[1]):
                    w.writerow([it, b, repr(self.t[it, b]), repr(self.task_loss[it, b]), repr(self.reg_loss[it, b]), repr(tot[it, b])])


def optimize(problem, net, policy: SchedulePolicy, cfg: PriorConfig, init, rng, prior=None) -> OptimResult:
    """Adam on x0 (and the problem's auxiliary variables) against L_task + lam_reg * L_DPoser.

    ``init`` is (d,) or (B, d) in normalized space.  ``rng`` is one Rng or one per
    row; each row draws its own timestep (random mode) and its own noise.
    ``prior`` overrides ``net`` as the regularizing model (``net`` supplies stats).
    """
    if policy.iters != cfg.iters:
        raise ValueError(f"policy has {policy.iters} iterations, config has {cfg.iters}")
    prior = net if prior is None else prior
    s = prior.schedule
    x = np.array(init, dtype=np.float64, ndmin=2)
    if x.shape[1] != net.dim:
        raise ValueError(f"init has {x.shape[1]} dims, model expects {net.dim}")
    nb, d = x.shape
    rngs = _rows(rng, nb)
    aux = {k: np.array(v, dtype=np.float64) for k, v in problem.aux_init(nb).items()}
    names = sorted(aux)
    sizes = [aux[k].size for k in names]
    flat = np.concatenate([x.reshape(-1)] + [aux[k].reshape(-1) for k in names])
    opt = AdamState(flat.size, lr=cfg.lr)

    t_hist = np.zeros((cfg.iters, nb))
    task_hist = np.zeros((cfg.iters, nb))
    reg_hist = np.zeros((cfg.iters, nb))
    for it in range(cfg.iters):
        t = np.array([schedule_timestep(policy, it, r) for r in rngs]) if policy.mode == "random" else np.full(nb, schedule_timestep(policy, it))
        pose = net.denormalize(x)
        l_task, g_pose, g_aux = problem.loss_and_grad(pose, aux)
        l_task = np.broadcast_to(np.asarray(l_task, dtype=np.float64), (nb,))
        grad_x = g_pose * net.std
        if cfg.lam_reg > 0:
            l_reg, g_reg, _ = dposer_loss_and_grad(prior, s, x, t, rngs, cfg.w_t)
            grad_x = grad_x + cfg.lam_reg * g_reg
        else:
            l_reg = np.zeros(nb)
        total = l_task + cfg.lam_reg * l_reg
        if not np.all(np.isfinite(total)) or not np.all(np.isfinite(grad_x)):
            raise NonFiniteLoss(it, t)
        t_hist[it], task_hist[it], reg_hist[it] = t, l_task, l_reg
        grad = np.concatenate([grad_x.reshape(-1)] + [np.asarray(g_aux[k]).reshape(-1) for k in names])
        flat = adam_step(flat, grad, opt)
        x = flat[: nb * d].reshape(nb, d)
        off = nb * d
        for k, n in zip(names, sizes):
            aux[k] = flat[off : off + n].reshape(aux[k].shape)
            off += n

    pose = net.denormalize(x)
    final, _, _ = problem.loss_and_grad(pose, aux)
    final = np.broadcast_to(np.asarray(final, dtype=np.float64), (nb,)).copy()
    return OptimResult(x, pose, aux, t_hist, task_hist, reg_hist, final, cfg.lam_reg)


def reference_descent(problem, net, cfg: PriorConfig, init) -> np.ndarray:
    """Task-only Adam loop written out longhand; used to check optimize with lam_reg = 0."""
    x = np.array(init, dtype=np.float64, ndmin=2)
    aux = problem.aux_init(x.shape[0])
    names = sorted(aux)
    states = [AdamState(x.size, lr=cfg.lr)] + [AdamState(aux[k].size, lr=cfg.lr) for k in names]
    for _ in range(cfg.iters):
        _, g_pose, g_aux = problem.loss_and_grad(net.denormalize(x), aux)
        x = adam_step(x, g_pose * net.std, states[0])
        aux = {k: adam_step(aux[k], np.asarray(g_aux[k]), st) for k, st in zip(names, states[1:])}
    return x
