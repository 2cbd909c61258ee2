"""Pose error, diversity and distribution metrics.

Point sets are (..., N, 3) arrays.  Pose-level metrics (APD, d_NN) compare
poses through their FK joints using the mean per-joint distance.
"""
from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .kinematics import KinematicTree, forward_kinematics
from .numerics import sym_psd_sqrt


class DegeneratePointSet(ValueError):
    pass


def procrustes_align(x: np.ndarray, y: np.ndarray):
    """Similarity transform minimizing ||s R x + t - y||_F over points (N, 3).

    Returns (aligned_x, (s, R, t)) with det R = +1.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2 or x.shape[1] != 3:
        raise ValueError(f"expected matching (N, 3) point sets, got {x.shape} and {y.shape}")
    if x.shape[0] < 3:
        raise DegeneratePointSet("need at least 3 points")
    mx, my = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - mx, y - my
    sv = np.linalg.svd(xc, compute_uv=False)
    if sv[1] <= 1e-12 * max(sv[0], 1e-300):
        raise DegeneratePointSet("source points are collinear or coincident")
    cov = yc.T @ xc / x.shape[0]
    u, d, vt = np.linalg.svd(cov)
    fix = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        fix[-1] = -1.0
    r = (u * fix) @ vt
    var_x = np.sum(xc * xc) / x.shape[0]
    s = float(np.sum(d * fix) / var_x)
    t = my - s * r @ mx
    return s * x @ r.T + t, (s, r, t)


def position_error(pred, gt, aligned: bool = False) -> float:
    """Mean Euclidean distance between corresponding points, optionally after Procrustes."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if aligned:
        p2 = pred.reshape(-1, *pred.shape[-2:])
        g2 = gt.reshape(-1, *gt.shape[-2:])
        pred = np.stack([procrustes_align(p, g)[0] for p, g in zip(p2, g2)]).reshape(gt.shape)
    return float(np.mean(np.linalg.norm(pred - gt, axis=-1)))


def per_sample_error(pred, gt, aligned: bool = False) -> np.ndarray:
    """Position error of each leading-axis item of (S, N, 3) arrays."""
    return np.array([position_error(p, g, aligned) for p, g in zip(pred, gt)])


def _joints(poses, tree: KinematicTree | None):
    poses = np.asarray(poses, dtype=np.float64)
    if tree is None:
        return poses
    return forward_kinematics(tree, poses)


def apd(solutions, tree: KinematicTree | None = None) -> float:
    """Average over unordered pairs of the mean joint distance between solutions.

    With ``tree`` the inputs are pose vectors passed through FK; without it they
    are taken to be joint arrays (S, N, 3) already.
    """
    j = _joints(solutions, tree)
    if j.shape[0] < 2:
        raise ValueError("APD needs at least 2 solutions")
    total, count = 0.0, 0
    for a in range(j.shape[0]):
        d = np.linalg.norm(j[a + 1 :] - j[a], axis=-1).mean(axis=-1)
        total += float(d.sum())
        count += d.size
    return total / count


def d_nn(samples, train, tree: KinematicTree | None = None, chunk: int = 256) -> float:
    """Mean distance from each sample to its nearest training item (mean joint distance)."""
    js, jt = _joints(samples, tree), _joints(train, tree)
    if js.shape[0] == 0 or jt.shape[0] == 0:
        raise ValueError("d_NN needs non-empty sample and training sets")
    best = np.empty(js.shape[0])
    for i in range(js.shape[0]):
        m = np.inf
        for c in range(0, jt.shape[0], chunk):
            d = np.linalg.norm(jt[c : c + chunk] - js[i], axis=-1).mean(axis=-1)
            m = min(m, float(d.min()))
        best[i] = m
    return float(best.mean())


def fid(a, b, ridge: float = 1e-8) -> float:
    """Frechet distance between Gaussian fits of two feature sets (rows = items)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    ca = np.atleast_2d(np.cov(a, rowvar=False))
    cb = np.atleast_2d(np.cov(b, rowvar=False))
    d = ca.shape[0]
    if a.shape[0] <= d or b.shape[0] <= d or min(np.linalg.matrix_rank(ca), np.linalg.matrix_rank(cb)) < d:
        warnings.warn("covariance is rank deficient; adding a small ridge", RuntimeWarning, stacklevel=2)
        ca = ca + ridge * np.eye(d)
        cb = cb + ridge * np.eye(d)
    sa = sym_psd_sqrt(ca)
    mid = sa @ cb @ sa
    cross = sym_psd_sqrt(0.5 * (mid + mid.T))
    diff = mu_a - mu_b
    return float(max(diff @ diff + np.trace(ca) + np.trace(cb) - 2.0 * np.trace(cross), 0.0))


def _knn_radii(x: np.ndarray, k: int) -> np.ndarray:
    dist, _ = cKDTree(x).query(x, k=k + 1)
    return dist[:, k]


def _coverage(query: np.ndarray, ref: np.ndarray, radii: np.ndarray, chunk: int = 512) -> float:
    inside = np.zeros(query.shape[0], dtype=bool)
    for c in range(0, query.shape[0], chunk):
        q = query[c : c + chunk]
        d2 = np.sum(q * q, 1)[:, None] + np.sum(ref * ref, 1)[None, :] - 2.0 * q @ ref.T
        d = np.sqrt(np.clip(d2, 0.0, None))
        inside[c : c + chunk] = np.any(d <= radii[None, :] * (1 + 1e-12) + 1e-12, axis=1)
    return float(inside.mean())


def precision_recall(gen, real, k: int = 3) -> tuple[float, float]:
    """k-NN manifold precision (gen inside real balls) and recall (real inside gen balls)."""
    gen = np.asarray(gen, dtype=np.float64).reshape(len(gen), -1)
    real = np.asarray(real, dtype=np.float64).reshape(len(real), -1)
    if k < 1 or k >= gen.shape[0] or k >= real.shape[0]:
        raise ValueError(f"k={k} must be smaller than both set sizes ({gen.shape[0]}, {real.shape[0]})")
    precision = _coverage(gen, real, _knn_radii(real, k))
    recall = _coverage(real, gen, _knn_radii(gen, k))
    return precision, recall


UNITS = {
    "mpjpe": "length",
    "mpvpe": "length",
    "pa_mpjpe": "length",
    "pa_mpvpe": "length",
    "apd": "length",
    "d_nn": "length",
    "fid": "dimensionless",
    "precision": "dimensionless",
    "recall": "dimensionless",
}


@dataclass
class MetricReport:
    values: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        for k, v in self.values.items():
            if not np.isfinite(v):
                raise ValueError(f"metric {k} is not finite")
            if k in ("precision", "recall") and not 0.0 <= v <= 1.0:
                raise ValueError(f"{k} must lie in [0, 1]")

    @property
    def units(self) -> dict[str, str]:
        return {k: UNITS.get(k, "dimensionless") for k in self.values}

    def to_json(self) -> str:
        return json.dumps({"values": self.values, "units": self.units, "counts": self.counts}, indent=2, sort_keys=True)

    def to_csv_row(self) -> str:
        keys = sorted(self.values)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(keys)
        w.writerow([repr(float(self.values[k])) for k in keys])
        return buf.getvalue()
