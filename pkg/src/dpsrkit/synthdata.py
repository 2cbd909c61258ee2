"""Synthetic pose distribution with analytic structure.

A Gaussian mixture over the pose vector.  Components flagged ``mirrored`` tie
the right-hand block to the mirror image of the left-hand block plus small
noise, giving a cross-part correlation that part-wise priors cannot express.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .kinematics import KinematicTree, default_tree
from .numerics import Rng

DATASET_MAGIC = b"DPSD"
DATASET_VERSION = 1
CHUNK = 1024
DEFAULT_SPEC_SEED = 7


class ImprobableObservation(ValueError):
    pass


@dataclass
class MixtureSpec:
    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    mirrored: np.ndarray
    split: dict[str, tuple[int, int]]
    mirror_signs: np.ndarray
    mirror_noise: float = 0.05

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.stds = np.atleast_2d(np.asarray(self.stds, dtype=np.float64))
        self.mirrored = np.asarray(self.mirrored, dtype=bool)
        self.mirror_signs = np.asarray(self.mirror_signs, dtype=np.float64)
        self.split = {k: (int(v[0]), int(v[1])) for k, v in self.split.items()}
        k = self.weights.size
        if abs(self.weights.sum() - 1.0) > 1e-9 or np.any(self.weights < 0):
            raise ValueError("mixture weights must be non-negative and sum to 1")
        if self.means.shape[0] != k or self.stds.shape != self.means.shape or self.mirrored.shape != (k,):
            raise ValueError("component arrays disagree in shape")
        if np.any(self.stds < 0) or self.mirror_noise < 0:
            raise ValueError("standard deviations must be non-negative")
        if np.any(self.mirrored):
            a, b = self.split["left_hand"]
            c, d = self.split["right_hand"]
            if b - a != d - c or self.mirror_signs.size != b - a:
                raise ValueError("mirrored components need equal-size hand blocks and matching mirror signs")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.size

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "stds": self.stds.tolist(),
            "mirrored": self.mirrored.tolist(),
            "split": {k: list(v) for k, v in self.split.items()},
            "mirror_signs": self.mirror_signs.tolist(),
            "mirror_noise": self.mirror_noise,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MixtureSpec":
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "MixtureSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def mirror_hand(self, block: np.ndarray) -> np.ndarray:
        return block * self.mirror_signs

    def component_gaussians(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Exact (mean, covariance) of each component including the mirror coupling."""
        out = []
        for k in range(self.n_components):
            mu = self.means[k].copy()
            cov = np.diag(self.stds[k] ** 2)
            if self.mirrored[k]:
                a, b = self.split["left_hand"]
                c, d = self.split["right_hand"]
                m = self.mirror_signs
                s_ll = self.stds[k, a:b] ** 2
                mu[c:d] = m * mu[a:b]
                cov[c:d, c:d] = np.diag(s_ll + self.mirror_noise**2)
                cov[a:b, c:d] = np.diag(s_ll * m)
                cov[c:d, a:b] = np.diag(s_ll * m)
            out.append((mu, cov))
        return out


def default_spec(tree: KinematicTree | None = None, seed: int = DEFAULT_SPEC_SEED, n_components: int = 6) -> MixtureSpec:
    """Six components, every other one with mirrored hands."""
    tree = default_tree() if tree is None else tree
    split = tree.part_ranges()
    d = tree.pose_dim
    rng = Rng(seed)
    spread = np.zeros(d)
    within = np.zeros(d)
    n_ang = 3 * len(tree.pose_joints)
    for part, (a, b) in split.items():
        spread[a:b] = {"body": 0.5, "left_hand": 0.4, "right_hand": 0.4, "face": 0.3}[part]
        within[a:b] = {"body": 0.3, "left_hand": 0.2, "right_hand": 0.2, "face": 0.2}[part]
    spread[n_ang:] = 1.0
    within[n_ang:] = 0.5
    means = spread * rng.normal((n_components, d))
    w = 0.5 + rng.uniform(n_components)
    mirrored = np.arange(n_components) % 2 == 0
    spec = MixtureSpec(
        weights=w / w.sum(),
        means=means,
        stds=np.tile(within, (n_components, 1)),
        mirrored=mirrored,
        split=split,
        mirror_signs=tree.hand_mirror_signs(),
    )
    # Store mirrored means consistently with what generation produces.
    a, b = split["left_hand"]
    c, e = split["right_hand"]
    spec.means[mirrored, c:e] = spec.means[mirrored, a:b] * spec.mirror_signs
    return spec


def _draw(spec: MixtureSpec, rng: Rng, n: int) -> tuple[np.ndarray, np.ndarray]:
    comp = rng.choice(spec.n_components, n, p=spec.weights)
    z = rng.normal((n, spec.dim))
    x = spec.means[comp] + spec.stds[comp] * z
    if np.any(spec.mirrored):
        a, b = spec.split["left_hand"]
        c, d = spec.split["right_hand"]
        zn = rng.normal((n, b - a))
        mir = spec.mirrored[comp]
        x[mir, c:d] = x[mir, a:b] * spec.mirror_signs + spec.mirror_noise * zn[mir]
    return x, comp


def sample_gt_pose(spec: MixtureSpec, rng: Rng, n: int | None = None, return_components: bool = False):
    """Draw poses from the mixture; chunks use split streams so results do not depend on chunking."""
    count = 1 if n is None else int(n)
    xs, cs = [], []
    for ci, start in enumerate(range(0, count, CHUNK)):
        x, c = _draw(spec, rng.split(ci), min(CHUNK, count - start))
        xs.append(x)
        cs.append(c)
    x = np.concatenate(xs) if xs else np.zeros((0, spec.dim))
    c = np.concatenate(cs) if cs else np.zeros(0, dtype=int)
    if n is None:
        x, c = x[0], c[0]
    return (x, c) if return_components else x


def sample_gt_sequence(
    spec: MixtureSpec,
    frames: int,
    rate: float,
    rng: Rng,
    component: int | None = None,
    step_fraction: float = 0.15,
) -> np.ndarray:
    """Discrete Ornstein-Uhlenbeck path in pose space around one component mean.

    x_{k+1} = m + exp(-rate) (x_k - m) + step_fraction * std * z_k, with x_0 = m + step_fraction * std * z_0.
    ``rate = inf`` reverts fully each frame; ``rate = 0`` is a random walk.
    """
    if frames < 2:
        raise ValueError("a sequence needs at least 2 frames")
    k = int(rng.choice(spec.n_components, p=spec.weights)) if component is None else int(component)
    mu = spec.means[k]
    step = step_fraction * spec.stds[k]
    keep = 0.0 if np.isinf(rate) else float(np.exp(-rate))
    z = rng.normal((frames, spec.dim))
    xs = np.empty((frames, spec.dim))
    xs[0] = mu + step * z[0]
    for f in range(1, frames):
        xs[f] = mu + keep * (xs[f - 1] - mu) + step * z[f]
    if spec.mirrored[k]:
        a, b = spec.split["left_hand"]
        c, d = spec.split["right_hand"]
        zn = rng.normal((frames, b - a))
        xs[:, c:d] = xs[:, a:b] * spec.mirror_signs + spec.mirror_noise * zn
    return xs


def _gauss_logpdf(x: np.ndarray, mu: np.ndarray, cov: np.ndarray) -> np.ndarray:
    chol = np.linalg.cholesky(cov)
    diff = np.atleast_2d(x) - mu
    sol = np.linalg.solve(chol, diff.T)
    with np.errstate(over="ignore"):
        # far-away observations overflow to inf and get zero weight downstream
        maha = np.sum(sol * sol, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (maha + logdet + mu.size * np.log(2.0 * np.pi))


def log_density(spec: MixtureSpec, x: np.ndarray) -> np.ndarray:
    """Analytic mixture log density of raw pose vectors (N, d)."""
    terms = [np.log(w) + _gauss_logpdf(x, mu, cov) for w, (mu, cov) in zip(spec.weights, spec.component_gaussians()) if w > 0]
    return logsumexp(np.stack(terms), axis=0)


@dataclass
class Posterior:
    samples: np.ndarray
    mean: np.ndarray
    responsibilities: np.ndarray
    comp_means: np.ndarray


def conditional_oracle(spec: MixtureSpec, observed: np.ndarray, values: np.ndarray, n: int, rng: Rng) -> Posterior:
    """Exact conditional of the mixture given observed dimensions.

    observed: integer indices (or a boolean mask) of observed dims; values: their raw values.
    """
    obs = np.asarray(observed)
    obs = np.flatnonzero(obs) if obs.dtype == bool else obs.astype(int)
    y = np.asarray(values, dtype=np.float64).reshape(-1)
    if obs.size == 0:
        raise ValueError("conditional_oracle needs at least one observed dimension")
    if y.size != obs.size or not np.all(np.isfinite(y)):
        raise ValueError("observed values must be finite and match the observed dims")
    un = np.setdiff1d(np.arange(spec.dim), obs)
    logw, cmeans, cchols = [], [], []
    for w, (mu, cov) in zip(spec.weights, spec.component_gaussians()):
        s_oo = cov[np.ix_(obs, obs)]
        s_uo = cov[np.ix_(un, obs)]
        s_uu = cov[np.ix_(un, un)]
        gain = np.linalg.solve(s_oo, s_uo.T).T
        cm = mu[un] + gain @ (y - mu[obs])
        ccov = s_uu - gain @ s_uo.T
        ccov = 0.5 * (ccov + ccov.T) + 1e-12 * np.eye(un.size)
        logw.append(np.log(w) + _gauss_logpdf(y, mu[obs], s_oo)[0] if w > 0 else -np.inf)
        cmeans.append(cm)
        cchols.append(np.linalg.cholesky(ccov) if un.size else np.zeros((0, 0)))
    logw = np.asarray(logw)
    if not np.any(np.isfinite(logw)):
        raise ImprobableObservation("observation has zero likelihood under every component")
    resp = np.exp(logw - logsumexp(logw))
    cmeans = np.asarray(cmeans)
    comp = rng.choice(spec.n_components, n, p=resp)
    z = rng.normal((n, un.size))
    samples = np.empty((n, spec.dim))
    samples[:, obs] = y
    for i in range(n):
        samples[i, un] = cmeans[comp[i]] + cchols[comp[i]] @ z[i]
    mean = np.empty(spec.dim)
    mean[obs] = y
    mean[un] = resp @ cmeans
    return Posterior(samples, mean, resp, cmeans)


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def from_data(cls, x: np.ndarray, floor: float = 1e-6) -> "NormStats":
        return cls(x.mean(axis=0), np.maximum(x.std(axis=0), floor))


def normalize(x, stats: NormStats):
    return (np.asarray(x) - stats.mean) / stats.std


def denormalize(z, stats: NormStats):
    return np.asarray(z) * stats.std + stats.mean


@dataclass
class Dataset:
    data: np.ndarray
    split: str
    spec_hash: str
    stats: NormStats
    extra: dict = field(default_factory=dict)

    @property
    def normalized(self) -> np.ndarray:
        return normalize(self.data, self.stats)

    def to_bytes(self) -> bytes:
        header = {
            "spec_hash": self.spec_hash,
            "split": self.split,
            "dims": int(self.data.shape[1]),
            "count": int(self.data.shape[0]),
            "mean": self.stats.mean.tolist(),
            "std": self.stats.std.tolist(),
            "extra": self.extra,
        }
        hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        arr = np.ascontiguousarray(self.data, dtype="<f8")
        return DATASET_MAGIC + struct.pack("<II", DATASET_VERSION, len(hb)) + hb + arr.tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Dataset":
        if blob[:4] != DATASET_MAGIC:
            raise ValueError("not a .dpsd dataset file")
        version, hlen = struct.unpack("<II", blob[4:12])
        if version != DATASET_VERSION:
            raise ValueError(f"unsupported dataset version {version}")
        h = json.loads(blob[12 : 12 + hlen].decode())
        data = np.frombuffer(blob[12 + hlen :], dtype="<f8").astype(np.float64)
        if data.size != h["count"] * h["dims"]:
            raise ValueError("dataset payload size disagrees with header")
        stats = NormStats(np.asarray(h["mean"]), np.asarray(h["std"]))
        return cls(data.reshape(h["count"], h["dims"]), h["split"], h["spec_hash"], stats, h.get("extra", {}))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Dataset":
        return cls.from_bytes(Path(path).read_bytes())

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


SPLIT_STREAMS = {"train": 0, "val": 1, "test": 2}


def make_splits(spec: MixtureSpec, n: int, seed: int, val_frac: float = 0.1, test_frac: float = 0.1) -> dict[str, Dataset]:
    """Train/val/test datasets from disjoint stream lineages; stats from train only."""
    counts = {"val": int(round(n * val_frac)), "test": int(round(n * test_frac))}
    counts["train"] = n - counts["val"] - counts["test"]
    if counts["train"] < 2:
        raise ValueError("need at least two training samples")
    root = Rng(seed)
    raw = {k: sample_gt_pose(spec, root.split(SPLIT_STREAMS[k]), counts[k]) for k in ("train", "val", "test")}
    stats = NormStats.from_data(raw["train"])
    h = spec.hash()
    return {k: Dataset(v, k, h, stats) for k, v in raw.items()}


def hand_dataset(spec: MixtureSpec, x_whole: np.ndarray) -> np.ndarray:
    """One-hand samples: left hands plus mirrored right hands, interleaved by index."""
    a, b = spec.split["left_hand"]
    c, d = spec.split["right_hand"]
    left = x_whole[:, a:b]
    right = spec.mirror_hand(x_whole[:, c:d])
    out = np.empty((2 * x_whole.shape[0], b - a))
    out[0::2] = left
    out[1::2] = right
    return out
