"""Denoising score-matching training with w(t) = sigma_t^2."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..numerics import AdamState, Rng, Tape, adam_step
from ..numerics import autodiff as ad
from .network import NoiseNet, flat_grad
from .schedule import Schedule

log = logging.getLogger(__name__)


class NonFiniteLoss(FloatingPointError):
    def __init__(self, iteration: int, t_values=None, detail: str = ""):
        msg = f"non-finite loss at iteration {iteration}"
        if t_values is not None:
            t = np.atleast_1d(t_values)
            msg += f" (t in [{t.min():.4g}, {t.max():.4g}], n={t.size})"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.iteration = iteration
        self.t_values = t_values


@dataclass
class TrainConfig:
    batch_size: int = 256
    iters: int = 20000
    lr: float = 1e-3
    lr_final: float | None = None  # cosine decay target; None keeps lr constant
    t_lo: float = 1e-3
    t_hi: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.t_lo < self.t_hi <= 1.0:
            raise ValueError(f"need 0 <= t_lo < t_hi <= 1, got [{self.t_lo}, {self.t_hi}]")
        if self.batch_size < 1 or self.iters < 0:
            raise ValueError("batch_size must be >= 1 and iters >= 0")

    def lr_at(self, it: int) -> float:
        if self.lr_final is None or self.iters <= 1:
            return self.lr
        c = 0.5 * (1.0 + np.cos(np.pi * min(it, self.iters - 1) / (self.iters - 1)))
        return self.lr_final + (self.lr - self.lr_final) * c


def loss_weight(s: Schedule, t):
    """w(t) = sigma_t^2."""
    return s.sigma(t) ** 2


def dsm_loss(predict: Callable, s: Schedule, x0: np.ndarray, t: np.ndarray, eps: np.ndarray) -> float:
    """Batch mean of w(t) ||eps - eps_hat(x_t, t)||^2 for any predictor (x_t, t) -> eps_hat."""
    a, sg = s.alpha(t)[:, None], s.sigma(t)[:, None]
    x_t = a * x0 + sg * eps
    err = eps - predict(x_t, t)
    return float(np.mean(loss_weight(s, t) * np.sum(err * err, axis=-1)))


def draw_batch_noise(rng: Rng, n: int, dim: int, cfg: TrainConfig):
    t = rng.uniform(n, cfg.t_lo, cfg.t_hi)
    eps = rng.normal((n, dim))
    return t, eps


def loss_and_grad(net: NoiseNet, x0: np.ndarray, t: np.ndarray, eps: np.ndarray, mask: np.ndarray | None = None):
    """DSM loss and its gradient w.r.t. the flat parameter vector.

    ``mask`` (B, dim) restricts the squared error to selected entries.
    """
    s = net.schedule
    a, sg = s.alpha(t)[:, None], s.sigma(t)[:, None]
    x_t = a * x0 + sg * eps
    tape = Tape()
    out, _, pvars = net.graph(tape, x_t, t)
    diff = ad.sub(out, eps)
    sq = ad.square(diff) if mask is None else ad.mul(ad.square(diff), mask)
    w = loss_weight(s, t)[:, None] / x0.shape[0]
    loss = ad.sum(ad.mul(sq, w))
    tape.backward(loss)
    return float(loss.value), flat_grad(tape, pvars)


def train_step(net: NoiseNet, batch: np.ndarray, cfg: TrainConfig, rng: Rng, opt: AdamState, iteration: int = 0) -> float:
    """One Adam step on a normalized batch; returns the batch loss before the update."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[0] == 0:
        raise ValueError("batch must be a non-empty (B, dim) array")
    t, eps = draw_batch_noise(rng, batch.shape[0], net.dim, cfg)
    loss, grad = loss_and_grad(net, batch, t, eps)
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise NonFiniteLoss(iteration, t)
    opt.lr = cfg.lr_at(iteration)
    net.params = adam_step(net.params, grad, opt)
    return loss


def train(net: NoiseNet, data_norm: np.ndarray, cfg: TrainConfig, rng: Rng | None = None, log_every: int = 0) -> np.ndarray:
    """Train on a normalized data matrix; returns the per-iteration loss history."""
    rng = Rng(cfg.seed) if rng is None else rng
    opt = AdamState(net.n_params, lr=cfg.lr)
    losses = np.zeros(cfg.iters)
    n = data_norm.shape[0]
    for it in range(cfg.iters):
        idx = rng.integers(n, cfg.batch_size)
        losses[it] = train_step(net, data_norm[idx], cfg, rng, opt, it)
        if log_every and (it + 1) % log_every == 0:
            log.info("iter %d loss %.5f", it + 1, np.mean(losses[max(0, it + 1 - log_every) : it + 1]))
    return losses
