"""Pose inverse problems and the multi-hypothesis driver.

Each problem evaluates its loss on raw poses in batches of rows and returns
(loss per row, gradient w.r.t. pose, gradients w.r.t. auxiliary variables).
"""
from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import evalmetrics
from .kinematics import Camera, KinematicTree, forward_kinematics, project_perspective
from .numerics import Rng, Tape
from .numerics import autodiff as ad
from .prior import PriorConfig, SchedulePolicy, optimize


@dataclass
class MaskSpec:
    observed: np.ndarray  # bool per pose dim, or per joint

    def __post_init__(self):
        self.observed = np.asarray(self.observed, dtype=bool)

    @property
    def count(self) -> int:
        return int(self.observed.sum())

    @classmethod
    def hiding(cls, dim: int, lo: int, hi: int) -> "MaskSpec":
        m = np.ones(dim, dtype=bool)
        m[lo:hi] = False
        return cls(m)


@dataclass
class RobustifierConfig:
    kind: str = "geman-mcclure"
    scale: float = 100.0

    def __post_init__(self):
        if self.kind not in ("squared", "geman-mcclure"):
            raise ValueError(f"unknown robustifier {self.kind!r}")
        if not self.scale > 0:
            raise ValueError("robustifier scale must be positive")

    def apply(self, r2):
        return r2 if self.kind == "squared" else ad.gm_rho(r2, self.scale)


def completion_loss(x0, mask: MaskSpec, y) -> float:
    x0 = np.asarray(x0, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if mask.observed.shape != x0.shape[-1:] or y.shape[-1] != mask.count:
        raise ValueError("mask and measurement do not match the pose")
    r = x0[..., mask.observed] - y
    return float(np.sum(r * r))


def _row_loss(fn, inputs: dict[str, np.ndarray]):
    """Evaluate a tape loss returning per-row values; gradients of their sum."""
    tape = Tape()
    vars_ = {k: tape.var(v) for k, v in inputs.items()}
    rows = fn(vars_)
    total = ad.sum(rows)
    tape.backward(total)
    return np.asarray(rows.value), {k: tape.grad(v) for k, v in vars_.items()}


def _sq_dist_rows(a, b, weight=None):
    """Sum over points and coordinates of (a - b)^2, per row; optional per-point weights."""
    d = ad.square(ad.sub(a, b))
    if weight is not None:
        d = ad.mul(d, weight[..., None])
    return ad.sum(ad.sum(d, axis=-1), axis=-1)


def ik_loss(pose, shape, tree: KinematicTree, target, known) -> float:
    known = np.asarray(known, dtype=int)
    if known.size == 0:
        raise ValueError("IK needs at least one observed joint")
    if known.min() < 0 or known.max() >= tree.n_joints:
        raise IndexError(f"joint index out of range [0, {tree.n_joints})")
    j = forward_kinematics(tree, np.asarray(pose, dtype=np.float64), shape)
    r = j[..., known, :] - np.asarray(target)[known]
    return float(np.sum(r * r))


def fit2d_loss(pose, shape, cam: Camera, keypoints, conf, robust: RobustifierConfig, tree: KinematicTree, orient=None, transl=None) -> float:
    conf = np.asarray(conf, dtype=np.float64)
    if np.any(conf < 0):
        raise ValueError("confidences must be non-negative")
    j = forward_kinematics(tree, np.asarray(pose, dtype=np.float64), shape, orient, transl)
    px = project_perspective(cam, j)
    r2 = np.sum((px - keypoints) ** 2, axis=-1)
    return float(np.sum(conf * robust.apply(r2)))


def motion_denoise_loss(poses, tree: KinematicTree, obs, mask, w_temp: float = 0.5, orient=None, transl=None) -> float:
    poses = np.asarray(poses, dtype=np.float64)
    if poses.shape[0] < 2 or poses.shape[0] != np.asarray(obs).shape[0]:
        raise ValueError("motion needs >= 2 frames matching the observation count")
    j = forward_kinematics(tree, poses, None, orient, transl)
    m = np.broadcast_to(np.asarray(mask, dtype=np.float64), j.shape[:2])[..., None]
    l_obs = np.sum((m * (j - obs)) ** 2)
    l_temp = np.sum((j[1:] - j[:-1]) ** 2)
    return float(l_obs + w_temp * l_temp)


@dataclass
class CompletionProblem:
    mask: MaskSpec
    y: np.ndarray
    kind: str = "completion"
    rows: int = 1

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.y.shape != (self.mask.count,):
            raise ValueError("measurement size must equal the number of observed dims")

    def aux_init(self, n: int) -> dict:
        return {}

    def loss_and_grad(self, pose, aux):
        r = np.zeros_like(pose)
        r[:, self.mask.observed] = pose[:, self.mask.observed] - self.y
        return np.sum(r * r, axis=1), 2.0 * r, {}

    def init(self, net, rng: Rng, n: int) -> np.ndarray:
        """Observed dims at the measurement, the rest from N(0, I) in normalized space."""
        x = np.stack([rng.split(i).normal(net.dim) for i in range(n)])
        full = np.zeros(net.dim)
        full[self.mask.observed] = self.y
        x[:, self.mask.observed] = net.normalize(full)[self.mask.observed]
        return x

    def to_dict(self) -> dict:
        return {"kind": self.kind, "mask": self.mask.observed.tolist(), "y": self.y.tolist()}


@dataclass
class IKProblem:
    tree: KinematicTree
    target: np.ndarray  # (J, 3)
    known: np.ndarray  # joint indices
    shape: np.ndarray | None = None
    kind: str = "ik"
    rows: int = 1

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=np.float64)
        self.known = np.asarray(self.known, dtype=int)
        if self.known.size == 0:
            raise ValueError("IK needs at least one observed joint")
        if self.known.min() < 0 or self.known.max() >= self.tree.n_joints:
            raise IndexError(f"joint index out of range [0, {self.tree.n_joints})")

    def aux_init(self, n: int) -> dict:
        return {}

    def loss_and_grad(self, pose, aux):
        tgt = self.target[self.known]

        def f(v):
            j = forward_kinematics(self.tree, v["pose"], self.shape)
            return _sq_dist_rows(ad.getitem(j, (slice(None), self.known)), tgt)

        rows, g = _row_loss(f, {"pose": pose})
        return rows, g["pose"], {}

    def init(self, net, rng: Rng, n: int) -> np.ndarray:
        return np.stack([rng.split(i).normal(net.dim) for i in range(n)])

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "target": self.target.tolist(),
            "known": self.known.tolist(),
            "shape": None if self.shape is None else np.asarray(self.shape).tolist(),
        }


@dataclass
class Fit2DProblem:
    tree: KinematicTree
    cam: Camera
    keypoints: np.ndarray  # (J, 2) pixels
    conf: np.ndarray  # (J,)
    robust: RobustifierConfig = field(default_factory=RobustifierConfig)
    w_beta: float = 1.0
    orient0: np.ndarray = field(default_factory=lambda: np.zeros(3))
    transl0: np.ndarray = field(default_factory=lambda: np.zeros(3))
    data_scale: float = 1e-3  # pixels^2 -> roughly unit scale at f = 1000
    kind: str = "fit2d"
    rows: int = 1

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64)
        self.conf = np.asarray(self.conf, dtype=np.float64)
        if self.keypoints.shape != (self.tree.n_joints, 2) or self.conf.shape != (self.tree.n_joints,):
            raise ValueError("need one keypoint and one confidence per joint")
        if np.any(self.conf < 0):
            raise ValueError("confidences must be non-negative")
        self.orient0 = np.asarray(self.orient0, dtype=np.float64)
        self.transl0 = np.asarray(self.transl0, dtype=np.float64)

    def aux_init(self, n: int) -> dict:
        return {
            "orient": np.tile(self.orient0, (n, 1)),
            "transl": np.tile(self.transl0, (n, 1)),
            "shape": np.zeros((n, self.tree.n_bones)),
        }

    def loss_and_grad(self, pose, aux):
        def f(v):
            j = forward_kinematics(self.tree, v["pose"], v["shape"], v["orient"], v["transl"])
            px = project_perspective(self.cam, j)
            r2 = ad.sum(ad.square(ad.sub(px, self.keypoints)), axis=-1)
            data = ad.sum(ad.mul(self.robust.apply(r2), self.conf), axis=-1)
            reg = ad.sum(ad.square(v["shape"]), axis=-1)
            return ad.add(ad.mul(data, self.data_scale), ad.mul(reg, self.w_beta))

        rows, g = _row_loss(f, {"pose": pose, **aux})
        return rows, g["pose"], {k: g[k] for k in aux}

    def init(self, net, rng: Rng, n: int) -> np.ndarray:
        return np.zeros((n, net.dim))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "camera": self.cam.to_dict(),
            "keypoints": self.keypoints.tolist(),
            "conf": self.conf.tolist(),
            "robust": {"kind": self.robust.kind, "scale": self.robust.scale},
            "w_beta": self.w_beta,
            "orient0": self.orient0.tolist(),
            "transl0": self.transl0.tolist(),
            "data_scale": self.data_scale,
        }


@dataclass
class MotionProblem:
    """Frames are rows; the temporal term couples neighbouring rows."""

    tree: KinematicTree
    obs: np.ndarray  # (F, J, 3)
    mask: np.ndarray  # (J,) or (F, J)
    w_temp: float = 0.5
    fit_global: bool = True
    kind: str = "motion"

    def __post_init__(self):
        self.obs = np.asarray(self.obs, dtype=np.float64)
        if self.obs.ndim != 3 or self.obs.shape[0] < 2 or self.obs.shape[1:] != (self.tree.n_joints, 3):
            raise ValueError("observations must be (frames >= 2, joints, 3)")
        self.mask = np.broadcast_to(np.asarray(self.mask, dtype=np.float64), self.obs.shape[:2]).copy()

    @property
    def rows(self) -> int:
        return self.obs.shape[0]

    def aux_init(self, n: int) -> dict:
        if n != self.rows:
            raise ValueError(f"motion problem has {self.rows} frames, got {n} rows")
        if not self.fit_global:
            return {}
        return {"orient": np.zeros((n, 3)), "transl": np.zeros((n, 3))}

    def loss_and_grad(self, pose, aux):
        if pose.shape[0] != self.rows:
            raise ValueError(f"frame count mismatch: {pose.shape[0]} vs {self.rows}")

        def f(v):
            j = forward_kinematics(self.tree, v["pose"], None, v.get("orient"), v.get("transl"))
            obs = _sq_dist_rows(j, self.obs, self.mask)
            step = ad.sub(ad.getitem(j, slice(1, None)), ad.getitem(j, slice(None, -1)))
            temp = ad.sum(ad.sum(ad.square(step), axis=-1), axis=-1)
            # frame k carries the temporal term between frames k-1 and k
            temp = ad.concat([np.zeros(1), temp], axis=0)
            return ad.add(obs, ad.mul(temp, self.w_temp))

        rows, g = _row_loss(f, {"pose": pose, **aux})
        return rows, g["pose"], {k: g[k] for k in aux}

    def init(self, net, rng: Rng, n: int) -> np.ndarray:
        return np.zeros((self.rows, net.dim))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "obs": self.obs.tolist(), "mask": self.mask.tolist(), "w_temp": self.w_temp, "fit_global": self.fit_global}


def problem_from_dict(d: dict, tree: KinematicTree):
    kind = d["kind"]
    if kind == "completion":
        return CompletionProblem(MaskSpec(d["mask"]), d["y"])
    if kind == "ik":
        return IKProblem(tree, d["target"], d["known"], None if d.get("shape") is None else np.asarray(d["shape"]))
    if kind == "fit2d":
        return Fit2DProblem(
            tree, Camera.from_dict(d["camera"]), d["keypoints"], d["conf"], RobustifierConfig(**d["robust"]),
            d["w_beta"], d["orient0"], d["transl0"], d.get("data_scale", 1e-3),
        )
    if kind == "motion":
        return MotionProblem(tree, d["obs"], d["mask"], d["w_temp"], d["fit_global"])
    raise ValueError(f"unknown problem kind {kind!r}")


def save_problem(problem, path) -> None:
    with open(path, "w") as fh:
        json.dump(problem.to_dict(), fh)


def load_problem(path, tree: KinematicTree):
    with open(path) as fh:
        return problem_from_dict(json.load(fh), tree)


@dataclass
class HypothesisSet:
    solutions: np.ndarray  # (S, d) or (S, F, d) raw poses
    losses: np.ndarray  # (S,) final task loss
    seeds: list  # per-hypothesis stream index
    errors: np.ndarray | None = None  # (S,) vs ground truth
    apd: float = 0.0
    aux: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.solutions) < 1:
            raise ValueError("a hypothesis set needs at least one solution")

    def stats(self) -> dict[str, float]:
        out = {"apd": float(self.apd), "n": len(self.solutions)}
        if self.errors is not None:
            e = np.asarray(self.errors, dtype=np.float64)
            out.update(min=float(e.min()), mean=float(e.mean()), std=float(e.std()))
        return out

    def to_json(self) -> str:
        return json.dumps(
            {
                "seeds": list(self.seeds),
                "losses": [float(v) for v in self.losses],
                "errors": None if self.errors is None else [float(v) for v in self.errors],
                "stats": self.stats(),
                "solutions": np.asarray(self.solutions).tolist(),
            },
            sort_keys=True,
        )

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["hypothesis", "seed", "final_loss", "error"])
            for i, s in enumerate(self.seeds):
                err = "" if self.errors is None else repr(float(self.errors[i]))
                w.writerow([i, s, repr(float(self.losses[i])), err])


def joint_error(tree: KinematicTree, pose, gt_pose, aux: dict | None = None, aligned: bool = False) -> float:
    """Mean joint distance of FK(pose) (with any fitted global transform) against FK(gt)."""
    aux = aux or {}
    j = forward_kinematics(tree, pose, aux.get("shape"), aux.get("orient"), aux.get("transl"))
    jg = forward_kinematics(tree, gt_pose)
    return evalmetrics.position_error(j, jg, aligned)


def _solve_chunk(args):
    problem, net, policy, cfg, rng, idx, prior = args
    if problem.rows == 1:
        init = np.concatenate([problem.init(net, rng.split(i).split(0), 1) for i in idx])
        res = optimize(problem, net, policy, cfg, init, [rng.split(i).split(1) for i in idx], prior)
        aux = [{k: v[b] for k, v in res.aux.items()} for b in range(len(idx))]
        return res.pose, res.final_task, aux
    poses, finals, auxes = [], [], []
    for i in idx:
        init = problem.init(net, rng.split(i).split(0), problem.rows)
        res = optimize(problem, net, policy, cfg, init, rng.split(i).split(1), prior)
        poses.append(res.pose)
        finals.append(float(np.sum(res.final_task)))
        auxes.append(res.aux)
    return np.stack(poses), np.array(finals), auxes


def run_multi_hypothesis(
    problem,
    n_hyp: int,
    net,
    policy: SchedulePolicy,
    cfg: PriorConfig,
    rng: Rng,
    gt=None,
    tree: KinematicTree | None = None,
    jobs: int = 1,
    prior=None,
    aligned: bool = False,
    hyp_ids=None,
) -> HypothesisSet:
    """S independent optimizations; hypothesis i uses streams rng.split(i).

    Rows of independent problems are solved as one batch per worker.  ``hyp_ids``
    overrides the stream indices (repeating an index repeats the hypothesis).
    """
    if n_hyp < 1:
        raise ValueError("need at least one hypothesis")
    ids = list(range(n_hyp)) if hyp_ids is None else [int(i) for i in hyp_ids]
    if len(ids) != n_hyp:
        raise ValueError("hyp_ids must have one entry per hypothesis")
    jobs = max(1, min(int(jobs), n_hyp))
    chunks = [ids[k::jobs] for k in range(jobs)]
    tasks = [(problem, net, policy, cfg, rng, c, prior) for c in chunks]
    if jobs == 1:
        parts = [_solve_chunk(tasks[0])]
    else:
        with ProcessPoolExecutor(jobs) as ex:
            parts = list(ex.map(_solve_chunk, tasks))
    # chunk k holds positions k, k + jobs, ...; undo the interleave
    placed = [j for k in range(jobs) for j in range(k, n_hyp, jobs)]
    perm = np.argsort(placed, kind="stable")
    sols = np.concatenate([p[0] for p in parts])[perm]
    finals = np.concatenate([p[1] for p in parts])[perm]
    flat_aux = [a for p in parts for a in p[2]]
    auxes = [flat_aux[k] for k in perm]

    errors = None
    if gt is not None and tree is not None:
        errors = np.array([joint_error(tree, sols[k], gt, auxes[k], aligned) for k in range(n_hyp)])
    spread = 0.0
    if n_hyp >= 2 and tree is not None:
        joints = forward_kinematics(tree, sols)
        spread = evalmetrics.apd(joints.reshape(n_hyp, -1, 3))
    return HypothesisSet(sols, finals, ids, errors, spread, auxes)
