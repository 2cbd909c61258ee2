"""Toy articulated figure: kinematic tree, forward kinematics and camera.

The figure stands in for a parametric body model.  Articulated joints carry a
3-vector axis-angle each; the root's rotation is the global orientation and
end sites (fingertips, ankles, face sites) carry no rotation but make every
articulated joint's rotation observable in the output positions.

All evaluation functions accept ndarrays or autodiff ``Var``s and broadcast
over leading batch dimensions.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import Rng, Var
from .numerics import autodiff as ad

MODEL_VERSION = 1
PARTS = ("body", "left_hand", "right_hand", "face")
EXPRESSION_SEED = 20240611
EXPRESSION_SCALE = 0.02


class NonPositiveDepth(ValueError):
    def __init__(self, index: int, depth: float):
        super().__init__(f"point {index} has non-positive camera depth {depth:.3e}")
        self.index = index
        self.depth = depth


@dataclass
class KinematicTree:
    names: list[str]
    parents: list[int]
    offsets: np.ndarray
    parts: list[str]
    articulated: list[bool]
    n_expression: int = 4
    expression_seed: int = EXPRESSION_SEED
    expression_scale: float = EXPRESSION_SCALE
    expression_basis: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        n = len(self.parents)
        if not (len(self.names) == len(self.parts) == len(self.articulated) == n):
            raise ValueError("tree field lengths disagree")
        if self.offsets.shape != (n, 3) or not np.all(np.isfinite(self.offsets)):
            raise ValueError("offsets must be finite with shape (J, 3)")
        roots = [j for j, p in enumerate(self.parents) if p < 0]
        if roots != [0]:
            raise ValueError("joint 0 must be the unique root")
        for j, p in enumerate(self.parents[1:], start=1):
            if not 0 <= p < j:
                raise ValueError(f"joint {j} has parent {p}; tree must be topologically sorted")
        if any(p not in PARTS for p in self.parts):
            raise ValueError(f"unknown part label in {set(self.parts)}")
        if self.expression_basis is None:
            self.expression_basis = expression_basis(
                3 * len(self.face_joints), self.n_expression, self.expression_seed, self.expression_scale
            )

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    @property
    def pose_joints(self) -> list[int]:
        """Articulated joints other than the root, in pose-vector order."""
        return [j for j in range(1, self.n_joints) if self.articulated[j]]

    @property
    def face_joints(self) -> list[int]:
        return [j for j in range(self.n_joints) if self.parts[j] == "face"]

    @property
    def n_bones(self) -> int:
        return self.n_joints - 1

    @property
    def pose_dim(self) -> int:
        return 3 * len(self.pose_joints) + self.n_expression

    def part_joints(self, part: str) -> list[int]:
        return [j for j in range(self.n_joints) if self.parts[j] == part]

    def part_ranges(self) -> dict[str, tuple[int, int]]:
        """Contiguous pose-vector ranges per part; expression closes the face block."""
        ranges: dict[str, list[int]] = {p: [] for p in PARTS}
        for k, j in enumerate(self.pose_joints):
            ranges[self.parts[j]].extend(range(3 * k, 3 * k + 3))
        n_ang = 3 * len(self.pose_joints)
        ranges["face"].extend(range(n_ang, n_ang + self.n_expression))
        out = {}
        for p, idx in ranges.items():
            if idx and idx != list(range(idx[0], idx[-1] + 1)):
                raise ValueError(f"part {p} is not contiguous in the pose vector")
            out[p] = (idx[0], idx[-1] + 1) if idx else (0, 0)
        return out

    def hand_mirror_signs(self) -> np.ndarray:
        """Sign flips taking a left-hand axis-angle block to its right-hand mirror."""
        a, b = self.part_ranges()["left_hand"]
        return np.tile([1.0, -1.0, -1.0], (b - a) // 3)

    def to_dict(self) -> dict:
        return {
            "model_version": MODEL_VERSION,
            "names": list(self.names),
            "parents": [int(p) for p in self.parents],
            "offsets": self.offsets.tolist(),
            "parts": list(self.parts),
            "articulated": [bool(a) for a in self.articulated],
            "n_expression": self.n_expression,
            "expression_seed": self.expression_seed,
            "expression_scale": self.expression_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KinematicTree":
        if d.get("model_version") != MODEL_VERSION:
            raise ValueError(f"unsupported model_version {d.get('model_version')!r}")
        return cls(
            names=d["names"],
            parents=d["parents"],
            offsets=np.asarray(d["offsets"]),
            parts=d["parts"],
            articulated=d["articulated"],
            n_expression=d["n_expression"],
            expression_seed=d["expression_seed"],
            expression_scale=d["expression_scale"],
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "KinematicTree":
        return cls.from_dict(json.loads(Path(path).read_text()))


def expression_basis(rows: int, cols: int, seed: int, scale: float) -> np.ndarray:
    """Scaled random matrix with orthonormal columns, reproducible from ``seed``."""
    if cols == 0:
        return np.zeros((rows, 0))
    g = Rng(seed).normal((rows, cols))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))
    return scale * q


def default_tree() -> KinematicTree:
    """11 body joints, 6 per hand, 3 face joints, 4 expression coefficients.

    Lengths are in metre-like units; y is up and the figure faces +z.
    """
    spec = [
        # name, parent, offset, part, articulated
        ("pelvis", None, (0.0, 0.0, 0.0), "body", True),
        ("spine", "pelvis", (0.0, 0.22, -0.02), "body", True),
        ("neck", "spine", (0.0, 0.28, 0.0), "body", True),
        ("head", "neck", (0.0, 0.10, 0.02), "body", True),
        ("l_hip", "pelvis", (0.10, -0.06, 0.0), "body", True),
        ("l_knee", "l_hip", (0.01, -0.40, 0.02), "body", True),
        ("r_hip", "pelvis", (-0.10, -0.06, 0.0), "body", True),
        ("r_knee", "r_hip", (-0.01, -0.40, 0.02), "body", True),
        ("l_shoulder", "spine", (0.17, 0.22, -0.02), "body", True),
        ("l_elbow", "l_shoulder", (0.27, 0.0, -0.01), "body", True),
        ("r_shoulder", "spine", (-0.17, 0.22, -0.02), "body", True),
        ("r_elbow", "r_shoulder", (-0.27, 0.0, -0.01), "body", True),
        ("l_ankle", "l_knee", (0.0, -0.40, -0.03), "body", False),
        ("r_ankle", "r_knee", (0.0, -0.40, -0.03), "body", False),
    ]
    for side, sx in (("l", 1.0), ("r", -1.0)):
        part = "left_hand" if side == "l" else "right_hand"
        spec += [
            (f"{side}_wrist", f"{side}_elbow", (sx * 0.25, 0.0, 0.01), part, True),
            (f"{side}_thumb1", f"{side}_wrist", (sx * 0.03, 0.0, 0.03), part, True),
            (f"{side}_thumb2", f"{side}_thumb1", (sx * 0.03, 0.0, 0.02), part, True),
            (f"{side}_index1", f"{side}_wrist", (sx * 0.09, 0.0, 0.015), part, True),
            (f"{side}_index2", f"{side}_index1", (sx * 0.04, -0.005, 0.0), part, True),
            (f"{side}_pinky1", f"{side}_wrist", (sx * 0.08, 0.0, -0.025), part, True),
            (f"{side}_thumb_tip", f"{side}_thumb2", (sx * 0.025, 0.0, 0.01), part, False),
            (f"{side}_index_tip", f"{side}_index2", (sx * 0.03, -0.005, 0.0), part, False),
            (f"{side}_pinky_tip", f"{side}_pinky1", (sx * 0.05, -0.005, 0.0), part, False),
        ]
    spec += [
        ("jaw", "head", (0.0, -0.02, 0.05), "face", True),
        ("l_eye", "head", (0.035, 0.06, 0.08), "face", True),
        ("r_eye", "head", (-0.035, 0.06, 0.08), "face", True),
        ("chin", "jaw", (0.0, -0.06, 0.05), "face", False),
        ("l_gaze", "l_eye", (0.0, 0.0, 0.03), "face", False),
        ("r_gaze", "r_eye", (0.0, 0.0, 0.03), "face", False),
    ]
    # Stable sort by part gives pose-vector order body | left hand | right hand | face;
    # each part lists joints parent-first, so parents still precede children.
    order = sorted(range(len(spec)), key=lambda i: (PARTS.index(spec[i][3]), i))
    names = [spec[i][0] for i in order]
    index = {n: k for k, n in enumerate(names)}
    return KinematicTree(
        names=names,
        parents=[-1 if spec[i][1] is None else index[spec[i][1]] for i in order],
        offsets=np.array([spec[i][2] for i in order]),
        parts=[spec[i][3] for i in order],
        articulated=[spec[i][4] for i in order],
    )


@dataclass
class Camera:
    focal: float = 1000.0
    principal: tuple[float, float] = (500.0, 500.0)
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 5.0]))

    def __post_init__(self):
        if not self.focal > 0:
            raise ValueError("focal length must be positive")
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "focal": self.focal,
            "principal": list(self.principal),
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(d["focal"], tuple(d["principal"]), np.asarray(d["rotation"]), np.asarray(d["translation"]))


def rodrigues(aa):
    """Axis-angle (..., 3) to rotation matrix (..., 3, 3)."""
    return ad.rodrigues(aa)


def _split_pose(tree: KinematicTree, pose):
    n_ang = 3 * len(tree.pose_joints)
    angles = pose[..., :n_ang]
    expr = pose[..., n_ang:]
    return angles, expr


def forward_kinematics(tree: KinematicTree, pose, shape=None, global_orient=None, transl=None):
    """World joint positions (..., J, 3).

    pose: (..., pose_dim) joint axis-angles followed by expression coefficients.
    shape: (..., n_bones) per-bone log-scale; bone k leads into joint k + 1.
    """
    pv = ad._val(pose)
    if pv.shape[-1] != tree.pose_dim:
        raise ValueError(f"pose has {pv.shape[-1]} entries, tree expects {tree.pose_dim}")
    if shape is not None and ad._val(shape).shape[-1] != tree.n_bones:
        raise ValueError(f"shape has {ad._val(shape).shape[-1]} entries, tree expects {tree.n_bones}")
    batch = pv.shape[:-1]
    angles, expr = _split_pose(tree, pose)

    local_rot: dict[int, object] = {}
    for k, j in enumerate(tree.pose_joints):
        local_rot[j] = ad.rodrigues(angles[..., 3 * k : 3 * k + 3])

    offsets = tree.offsets
    if shape is not None:
        scale = ad.exp(shape)
        bone_offsets = ad.mul(ad.reshape(scale, ad._val(scale).shape + (1,)), offsets[1:])
    else:
        bone_offsets = np.broadcast_to(offsets[1:], batch + offsets[1:].shape)

    root_rot = np.broadcast_to(np.eye(3), batch + (3, 3)) if global_orient is None else ad.rodrigues(global_orient)
    root_pos = np.zeros(batch + (3,)) if transl is None else ad.add(np.zeros(batch + (3,)), transl)

    world_rot = [None] * tree.n_joints
    world_pos = [None] * tree.n_joints
    world_rot[0] = root_rot
    world_pos[0] = root_pos
    for j in range(1, tree.n_joints):
        p = tree.parents[j]
        off = bone_offsets[..., j - 1, :]
        world_pos[j] = ad.add(world_pos[p], ad.matvec(world_rot[p], off))
        if tree.articulated[j]:
            world_rot[j] = ad.matmul(world_rot[p], local_rot[j])
    joints = ad.stack(world_pos, axis=-2)

    if tree.n_expression and tree.face_joints:
        face = tree.face_joints
        head = tree.parents[face[0]]
        disp = ad.matvec(tree.expression_basis, expr)  # (..., 3 * n_face)
        disp = ad.reshape(disp, batch + (len(face), 3))
        disp = ad.matvec(ad.reshape(world_rot[head], batch + (1, 3, 3)), disp)
        pad = np.zeros((tree.n_joints, len(face)))
        pad[face, np.arange(len(face))] = 1.0
        joints = ad.add(joints, ad.matmul(pad, disp))
    return joints


def bone_pairs(tree: KinematicTree) -> tuple[np.ndarray, np.ndarray]:
    child = np.arange(1, tree.n_joints)
    return np.asarray(tree.parents)[child], child


VERTEX_FRACTIONS = (0.25, 0.5, 0.75)


def surrogate_vertices(tree: KinematicTree, joints):
    """Three points per bone at 1/4, 1/2, 3/4 along each parent->child segment."""
    par, ch = bone_pairs(tree)
    a = ad.getitem(joints, (..., par, slice(None))) if isinstance(joints, Var) else joints[..., par, :]
    b = ad.getitem(joints, (..., ch, slice(None))) if isinstance(joints, Var) else joints[..., ch, :]
    verts = [ad.add(a, ad.mul(f, ad.sub(b, a))) for f in VERTEX_FRACTIONS]
    out = ad.stack(verts, axis=-2)  # (..., bones, 3 fractions, 3)
    shp = ad._val(out).shape
    return ad.reshape(out, shp[:-3] + (shp[-3] * shp[-2], 3))


def project_perspective(cam: Camera, points, min_depth: float = 1e-6):
    """Pinhole projection of world points (..., N, 3) to pixels (..., N, 2)."""
    pc = ad.add(ad.matvec(cam.rotation, points), cam.translation)
    pcv = ad._val(pc)
    z = pcv[..., 2]
    bad = np.flatnonzero(~(z > min_depth).reshape(-1))
    if bad.size:
        raise NonPositiveDepth(int(bad[0] % z.shape[-1]), float(z.reshape(-1)[bad[0]]))
    xy = ad.getitem(pc, (..., slice(0, 2))) if isinstance(pc, Var) else pcv[..., :2]
    zz = ad.getitem(pc, (..., slice(2, 3))) if isinstance(pc, Var) else pcv[..., 2:3]
    return ad.add(ad.mul(cam.focal, ad.div(xy, zz)), np.asarray(cam.principal))
