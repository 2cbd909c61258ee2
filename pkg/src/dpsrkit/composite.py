"""Whole-figure prior assembled from frozen part networks.

Variants:
  base   concatenated part predictions (right hand through the shared hand net, mirrored)
  fused  base plus a residual module over the part nets' last-layer features
  mixed  same architecture as fused, trained on mixed part/whole sources with random part masking
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion.checkpoint import CheckpointError, net_from_bytes, net_to_bytes, pack, unpack
from .diffusion.network import NoiseNet, flat_grad, init_params, mlp_forward, param_layout, preconditioning, time_embedding, unpack as unpack_params
from .diffusion.schedule import Schedule
from .diffusion.training import NonFiniteLoss, TrainConfig, draw_batch_noise, loss_weight
from .numerics import AdamState, Rng, Tape, adam_step
from .numerics import autodiff as ad

VARIANTS = ("base", "fused", "mixed")
PART_ORDER = ("body", "left_hand", "right_hand", "face")
SOURCES = ("whole", "body", "one_hand", "two_hand", "face")
DEFAULT_SOURCE_WEIGHTS = (0.65, 0.14, 0.12, 0.04, 0.05)
MASK_PROB = 0.2
PART_MASK_PROB = 1.0 / 3.0
MASKABLE = ("left_hand", "right_hand", "face")


@dataclass
class PartSplit:
    ranges: dict[str, tuple[int, int]]

    def __post_init__(self):
        self.ranges = {k: (int(v[0]), int(v[1])) for k, v in self.ranges.items()}
        if set(self.ranges) != set(PART_ORDER):
            raise ValueError(f"split must name exactly {PART_ORDER}")
        spans = sorted(self.ranges.values())
        if spans[0][0] != 0 or any(a[1] != b[0] for a, b in zip(spans, spans[1:])):
            raise ValueError("part ranges must be disjoint and cover the vector")
        lh, rh = self.ranges["left_hand"], self.ranges["right_hand"]
        if lh[1] - lh[0] != rh[1] - rh[0]:
            raise ValueError("hand blocks must have equal size")

    @property
    def dim(self) -> int:
        return max(b for _, b in self.ranges.values())

    def slice(self, part: str) -> slice:
        a, b = self.ranges[part]
        return slice(a, b)

    def size(self, part: str) -> int:
        a, b = self.ranges[part]
        return b - a

    def block_mask(self, parts) -> np.ndarray:
        m = np.zeros(self.dim)
        for p in parts:
            m[self.slice(p)] = 1.0
        return m


@dataclass
class CompositeNet:
    split: PartSplit
    body: NoiseNet
    hand: NoiseNet
    face: NoiseNet
    mirror: np.ndarray
    variant: str = "base"
    hidden: int = 256
    blocks: int = 2
    temb_dim: int = 64
    fused_temb: bool = True
    fused_params: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        self.mirror = np.asarray(self.mirror, dtype=np.float64)
        for part, net in (("body", self.body), ("left_hand", self.hand), ("face", self.face)):
            if net.dim != self.split.size(part):
                raise ValueError(f"{part} net has dim {net.dim}, split needs {self.split.size(part)}")
        if self.mirror.shape != (self.hand.dim,):
            raise ValueError("mirror map must match the hand block")
        feat = self.body.hidden + 2 * self.hand.hidden + self.face.hidden
        self.fused_layout = param_layout(feat, self.hidden, self.blocks, self.temb_dim if self.fused_temb else 0, out_dim=self.dim)
        if self.fused_params is None:
            self.fused_params = np.zeros(sum(int(np.prod(s)) for _, s in self.fused_layout))
        self.fused_params = np.asarray(self.fused_params, dtype=np.float64)
        unpack_params(self.fused_params, self.fused_layout)
        m = self.mirror
        self.mean = np.concatenate([self.body.mean, self.hand.mean, m * self.hand.mean, self.face.mean])
        self.std = np.concatenate([self.body.std, self.hand.std, self.hand.std, self.face.std])

    @classmethod
    def assemble(cls, split: PartSplit, body: NoiseNet, hand: NoiseNet, face: NoiseNet, mirror, variant: str = "base", rng: Rng | None = None, **kw):
        cn = cls(split, body, hand, face, mirror, variant, **kw)
        if variant != "base":
            cn.fused_params = init_params(cn.fused_layout, Rng(0) if rng is None else rng)
        return cn

    @property
    def dim(self) -> int:
        return self.split.dim

    @property
    def schedule(self) -> Schedule:
        return self.body.schedule

    def normalize(self, x):
        return (np.asarray(x) - self.mean) / self.std

    def denormalize(self, z):
        return np.asarray(z) * self.std + self.mean

    def part_outputs(self, xb: np.ndarray, t):
        """Base prediction (B, dim) and concatenated part features."""
        sp, m = self.split, self.mirror
        eb, fb = self.body.forward_with_features(xb[:, sp.slice("body")], t)
        el, fl = self.hand.forward_with_features(xb[:, sp.slice("left_hand")], t)
        er, fr = self.hand.forward_with_features(xb[:, sp.slice("right_hand")] * m, t)
        ef, ff = self.face.forward_with_features(xb[:, sp.slice("face")], t)
        base = np.empty_like(xb)
        base[:, sp.slice("body")] = eb
        base[:, sp.slice("left_hand")] = el
        base[:, sp.slice("right_hand")] = er * m
        base[:, sp.slice("face")] = ef
        return base, np.concatenate([fb, fl, fr, ff], axis=1)

    def _fused_inputs(self, xb, t):
        tb = np.broadcast_to(np.asarray(t, dtype=np.float64), (xb.shape[0],))
        temb = time_embedding(tb, self.temb_dim) if self.fused_temb else np.zeros((xb.shape[0], 0))
        return temb, preconditioning(self.schedule, tb)[1]

    def predict(self, x_t, t) -> np.ndarray:
        x = np.asarray(x_t, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise ValueError(f"input has {x.shape[-1]} dims, composite expects {self.dim}")
        single = x.ndim == 1
        xb = x[None] if single else x
        base, feat = self.part_outputs(xb, t)
        if self.variant == "base":
            out = base
        else:
            temb, c_out = self._fused_inputs(xb, t)
            res, _ = mlp_forward(unpack_params(self.fused_params, self.fused_layout), feat, temb, self.blocks)
            out = base + c_out * res
        return out[0] if single else out

    def copy(self) -> "CompositeNet":
        return CompositeNet(
            self.split, self.body.copy(), self.hand.copy(), self.face.copy(), self.mirror.copy(), self.variant,
            self.hidden, self.blocks, self.temb_dim, self.fused_temb, self.fused_params.copy(),
        )


def composite_forward(cnet: CompositeNet, x_t, t) -> np.ndarray:
    return cnet.predict(x_t, t)


@dataclass
class MixedBatch:
    x: np.ndarray  # (B, dim) normalized, unavailable/masked parts zero
    loss_mask: np.ndarray  # (B, dim) 1 where the loss applies
    source: np.ndarray  # (B,) index into SOURCES
    masked_event: np.ndarray  # (B,) whole-body items that went through random masking


class MixtureSampler:
    """Draws mixed-source batches with fixed source proportions.

    ``pools`` maps a source name to normalized whole-layout vectors (B_s, dim)
    whose unavailable blocks are already zero.
    """

    def __init__(self, split: PartSplit, pools: dict[str, np.ndarray], weights, mask_prob: float = MASK_PROB):
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (len(SOURCES),) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("source weights must be 5 non-negative numbers summing to 1")
        for name, wk in zip(SOURCES, w):
            if wk > 0 and (name not in pools or len(pools[name]) == 0):
                raise ValueError(f"source {name!r} has positive weight but no data")
        self.split, self.pools, self.weights, self.mask_prob = split, pools, w, mask_prob
        full = split.block_mask(PART_ORDER)
        self.source_masks = {
            "whole": full,
            "body": split.block_mask(["body"]),
            "two_hand": split.block_mask(["left_hand", "right_hand"]),
            "face": split.block_mask(["face"]),
            "left_hand": split.block_mask(["left_hand"]),
            "right_hand": split.block_mask(["right_hand"]),
        }

    def draw(self, rng: Rng, n: int) -> MixedBatch:
        if n < 1:
            raise ValueError("empty batch")
        src = rng.choice(len(SOURCES), n, p=self.weights)
        x = np.zeros((n, self.split.dim))
        lm = np.zeros((n, self.split.dim))
        event = np.zeros(n, dtype=bool)
        u_evt = rng.uniform(n)
        u_parts = rng.uniform((n, len(MASKABLE)))
        for k, name in enumerate(SOURCES):
            rows = np.flatnonzero(src == k)
            if rows.size == 0:
                continue
            pool = self.pools[name]
            x[rows] = pool[rng.integers(len(pool), rows.size)]
            if name == "one_hand":
                has_left = np.any(x[rows, self.split.slice("left_hand")] != 0.0, axis=1)
                lm[rows] = np.where(has_left[:, None], self.source_masks["left_hand"], self.source_masks["right_hand"])
            else:
                lm[rows] = self.source_masks[name]
        whole = np.flatnonzero(src == 0)
        fire = whole[u_evt[whole] <= self.mask_prob]
        event[fire] = True
        for j, part in enumerate(MASKABLE):
            hit = fire[u_parts[fire, j] <= PART_MASK_PROB]
            x[np.ix_(hit, np.arange(*self.split.ranges[part]))] = 0.0
        return MixedBatch(x, lm, src, event)


def build_mixture_schedule(split: PartSplit, pools: dict[str, np.ndarray], weights=DEFAULT_SOURCE_WEIGHTS) -> MixtureSampler:
    return MixtureSampler(split, pools, weights)


def source_pools(cnet: CompositeNet, whole_raw: np.ndarray, rng: Rng, n_each: int | None = None) -> dict[str, np.ndarray]:
    """Part-only pools by marginalizing whole-figure samples (dropping the other blocks)."""
    sp = cnet.split
    z = cnet.normalize(whole_raw)
    n = z.shape[0] if n_each is None else min(n_each, z.shape[0])
    pick = {name: z[rng.split(i).permutation(z.shape[0])[:n]] for i, name in enumerate(SOURCES)}
    pools = {"whole": pick["whole"]}
    for name, parts in (("body", ["body"]), ("two_hand", ["left_hand", "right_hand"]), ("face", ["face"])):
        pools[name] = pick[name] * sp.block_mask(parts)
    # one hand per item, left or right with equal odds
    left = rng.split(len(SOURCES)).uniform(n) <= 0.5
    oh = pick["one_hand"] * np.where(left[:, None], sp.block_mask(["left_hand"]), sp.block_mask(["right_hand"]))
    pools["one_hand"] = oh
    return pools


def fused_loss_and_grad(cnet: CompositeNet, x0: np.ndarray, t: np.ndarray, eps: np.ndarray, loss_mask: np.ndarray | None = None):
    """Masked DSM loss; gradient w.r.t. the fused parameters only."""
    s = cnet.schedule
    a, sg = s.alpha(t)[:, None], s.sigma(t)[:, None]
    x_t = a * x0 + sg * eps
    base, feat = cnet.part_outputs(x_t, t)
    temb, c_out = cnet._fused_inputs(x_t, t)
    tape = Tape()
    views = unpack_params(cnet.fused_params, cnet.fused_layout)
    pvars = {name: tape.var(views[name]) for name, _ in cnet.fused_layout}
    res, _ = mlp_forward(pvars, feat, temb, cnet.blocks)
    out = ad.add(base, ad.mul(res, c_out))
    sq = ad.square(ad.sub(out, eps))
    if loss_mask is not None:
        sq = ad.mul(sq, loss_mask)
    loss = ad.sum(ad.mul(sq, loss_weight(s, t)[:, None] / x0.shape[0]))
    tape.backward(loss)
    return float(loss.value), flat_grad(tape, [pvars[n] for n, _ in cnet.fused_layout])


def _step(cnet, x0, lm, cfg, rng, opt, it):
    t, eps = draw_batch_noise(rng, x0.shape[0], cnet.dim, cfg)
    loss, grad = fused_loss_and_grad(cnet, x0, t, eps, lm)
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise NonFiniteLoss(it, t)
    opt.lr = cfg.lr_at(it)
    cnet.fused_params = adam_step(cnet.fused_params, grad, opt)
    return loss


def mixed_train_step(cnet: CompositeNet, batch: MixedBatch, cfg: TrainConfig, rng: Rng, opt: AdamState, it: int = 0) -> float:
    if batch.x.shape[0] == 0:
        raise ValueError("empty batch")
    if cnet.variant == "base":
        raise ValueError("the base variant has no trainable parameters")
    return _step(cnet, batch.x, batch.loss_mask, cfg, rng, opt, it)


def train_fused(cnet: CompositeNet, whole_norm: np.ndarray, cfg: TrainConfig, rng: Rng) -> np.ndarray:
    """Fused variant: whole-figure data, loss on every block."""
    opt = AdamState(cnet.fused_params.size, lr=cfg.lr)
    hist = np.zeros(cfg.iters)
    for it in range(cfg.iters):
        idx = rng.integers(whole_norm.shape[0], cfg.batch_size)
        hist[it] = _step(cnet, whole_norm[idx], None, cfg, rng, opt, it)
    return hist


def train_mixed(cnet: CompositeNet, sampler: MixtureSampler, cfg: TrainConfig, rng: Rng) -> np.ndarray:
    opt = AdamState(cnet.fused_params.size, lr=cfg.lr)
    hist = np.zeros(cfg.iters)
    for it in range(cfg.iters):
        batch = sampler.draw(rng, cfg.batch_size)
        hist[it] = mixed_train_step(cnet, batch, cfg, rng, opt, it)
    return hist


def composite_to_bytes(cnet: CompositeNet) -> bytes:
    meta = {
        "kind": "composite",
        "variant": cnet.variant,
        "split": {k: list(v) for k, v in cnet.split.ranges.items()},
        "hidden": cnet.hidden,
        "blocks": cnet.blocks,
        "temb_dim": cnet.temb_dim,
        "fused_temb": cnet.fused_temb,
    }
    return pack(
        meta,
        [
            ("body", net_to_bytes(cnet.body)),
            ("hand", net_to_bytes(cnet.hand)),
            ("face", net_to_bytes(cnet.face)),
            ("mirror", cnet.mirror),
            ("fused", cnet.fused_params),
        ],
    )


def composite_from_bytes(data: bytes) -> CompositeNet:
    meta, sec = unpack(data)
    if meta.get("kind") != "composite":
        raise CheckpointError(f"expected a composite checkpoint, got {meta.get('kind')!r}")
    return CompositeNet(
        PartSplit(meta["split"]),
        net_from_bytes(sec["body"]),
        net_from_bytes(sec["hand"]),
        net_from_bytes(sec["face"]),
        sec["mirror"],
        meta["variant"],
        meta["hidden"],
        meta["blocks"],
        meta["temb_dim"],
        meta["fused_temb"],
        sec["fused"],
    )


def save_composite(cnet: CompositeNet, path) -> None:
    Path(path).write_bytes(composite_to_bytes(cnet))


def load_composite(path) -> CompositeNet:
    return composite_from_bytes(Path(path).read_bytes())
