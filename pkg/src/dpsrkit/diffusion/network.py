"""Residual fully connected noise predictor eps_phi(x_t; t)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..numerics import Rng, Tape
from ..numerics import autodiff as ad
from .schedule import Schedule


TIME_SCALE = 10.0


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding of diffusion time, shape (B, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = TIME_SCALE * t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


def preconditioning(s: Schedule, t) -> tuple[np.ndarray, np.ndarray]:
    """Input and output scalings, shape (B, 1).

    For unit-variance data x_t has variance alpha^2 + sigma^2, and the optimal
    eps has magnitude about sigma / sqrt(alpha^2 + sigma^2).  Scaling by these
    keeps the trunk's input and target O(1) at every t.
    """
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    a, sg = s.alpha(t), s.sigma(t)
    r = np.sqrt(a * a + sg * sg)
    return (1.0 / r)[:, None], (sg / r)[:, None]


def param_layout(dim: int, hidden: int, blocks: int, temb_dim: int, out_dim: int | None = None) -> list[tuple[str, tuple[int, ...]]]:
    out_dim = dim if out_dim is None else out_dim
    layout = [("w_in", (dim + temb_dim, hidden)), ("b_in", (hidden,))]
    for k in range(blocks):
        layout += [
            (f"w{k}a", (hidden, hidden)),
            (f"b{k}a", (hidden,)),
            (f"w{k}b", (hidden, hidden)),
            (f"b{k}b", (hidden,)),
        ]
    layout += [("w_out", (hidden, out_dim)), ("b_out", (out_dim,))]
    return layout


def unpack(params: np.ndarray, layout) -> dict[str, np.ndarray]:
    out, off = {}, 0
    for name, shp in layout:
        n = int(np.prod(shp))
        out[name] = params[off : off + n].reshape(shp)
        off += n
    if off != params.size:
        raise ValueError(f"parameter vector has {params.size} entries, layout needs {off}")
    return out


def init_params(layout, rng: Rng) -> np.ndarray:
    """LeCun-normal weights, zero biases, zero output layer."""
    chunks = []
    for name, shp in layout:
        if name.startswith("w") and name != "w_out":
            chunks.append(rng.normal(shp).reshape(-1) / np.sqrt(shp[0]))
        else:
            chunks.append(np.zeros(int(np.prod(shp))))
    return np.concatenate(chunks)


def mlp_forward(p: dict, x, temb: np.ndarray, blocks: int):
    """Shared trunk; returns (output, last-layer features). Works on ndarrays or Vars."""
    h = ad.add(ad.matmul(ad.concat([x, temb], axis=-1), p["w_in"]), p["b_in"])
    for k in range(blocks):
        r = ad.add(ad.matmul(ad.silu(h), p[f"w{k}a"]), p[f"b{k}a"])
        r = ad.add(ad.matmul(ad.silu(r), p[f"w{k}b"]), p[f"b{k}b"])
        h = ad.add(h, r)
    feat = ad.silu(h)
    out = ad.add(ad.matmul(feat, p["w_out"]), p["b_out"])
    return out, feat


@dataclass
class NoiseNet:
    """Noise predictor over a normalized pose vector, with its data statistics."""

    dim: int
    hidden: int = 256
    blocks: int = 2
    temb_dim: int = 64
    schedule: Schedule = field(default_factory=Schedule)
    params: np.ndarray = field(default=None, repr=False)
    mean: np.ndarray = field(default=None, repr=False)
    std: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.layout = param_layout(self.dim, self.hidden, self.blocks, self.temb_dim)
        if self.params is None:
            self.params = np.zeros(sum(int(np.prod(s)) for _, s in self.layout))
        self.params = np.asarray(self.params, dtype=np.float64)
        unpack(self.params, self.layout)
        self.mean = np.zeros(self.dim) if self.mean is None else np.asarray(self.mean, dtype=np.float64)
        self.std = np.ones(self.dim) if self.std is None else np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != (self.dim,) or self.std.shape != (self.dim,):
            raise ValueError("normalization stats must have one entry per dimension")
        if np.any(self.std <= 0):
            raise ValueError("normalization std must be positive")

    @classmethod
    def create(cls, dim: int, rng: Rng, hidden: int = 256, blocks: int = 2, temb_dim: int = 64, **kw) -> "NoiseNet":
        net = cls(dim, hidden, blocks, temb_dim, **kw)
        net.params = init_params(net.layout, rng)
        return net

    @property
    def n_params(self) -> int:
        return self.params.size

    def normalize(self, x):
        return (np.asarray(x) - self.mean) / self.std

    def denormalize(self, z):
        return np.asarray(z) * self.std + self.mean

    def _prep(self, x_t, t):
        x = np.asarray(ad._val(x_t), dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise ValueError(f"input has {x.shape[-1]} dims, net expects {self.dim}")
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite network input")
        b = x.shape[0] if x.ndim == 2 else 1
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
        c_in, c_out = preconditioning(self.schedule, t)
        return time_embedding(t, self.temb_dim), c_in, c_out

    def forward_with_features(self, x_t, t):
        """(eps_hat, features) for a batch (B, dim) or single vector."""
        x = np.asarray(x_t, dtype=np.float64)
        single = x.ndim == 1
        xb = x[None] if single else x
        temb, c_in, c_out = self._prep(xb, t)
        raw, feat = mlp_forward(unpack(self.params, self.layout), c_in * xb, temb, self.blocks)
        out = c_out * raw
        return (out[0], feat[0]) if single else (out, feat)

    def predict(self, x_t, t) -> np.ndarray:
        return self.forward_with_features(x_t, t)[0]

    def graph(self, tape: Tape, x_t, t):
        """Record a forward pass with the parameters as tape inputs.

        Returns (eps_hat, features, param_vars) where param_vars follow the layout order.
        """
        temb, c_in, c_out = self._prep(x_t, t)
        views = unpack(self.params, self.layout)
        pvars = {name: tape.var(views[name]) for name, _ in self.layout}
        raw, feat = mlp_forward(pvars, ad.mul(x_t, c_in), temb, self.blocks)
        return ad.mul(raw, c_out), feat, [pvars[name] for name, _ in self.layout]

    def copy(self) -> "NoiseNet":
        return NoiseNet(
            self.dim, self.hidden, self.blocks, self.temb_dim, self.schedule,
            self.params.copy(), self.mean.copy(), self.std.copy(),
        )


def net_forward(net: NoiseNet, x_t, t) -> np.ndarray:
    """eps_phi(x_t; t) in normalized space."""
    return net.predict(x_t, t)


def flat_grad(tape: Tape, pvars) -> np.ndarray:
    return np.concatenate([tape.grad(v).reshape(-1) for v in pvars])
