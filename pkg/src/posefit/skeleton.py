"""Kinematic skeleton: joint tree, forward kinematics and calibration.

Camera-space convention throughout the package: x right, y down, z forward,
millimetres. A zero pose stands upright facing the camera.

Every joint carries a 3-DOF exponential-map rotation. The rotation of joint
``k`` moves all bones hanging below ``k``; leaf rotations have no effect on
positions and are ignored by the fitter.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, ContractError

ROOT_PARENT = -1
NORMALIZED_KNEE_NECK_MM = 920.0

# head, neck, shoulders, elbows, wrists, hips, knees, ankles
EVAL_JOINTS = (
    "head_top", "neck",
    "l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist",
    "l_hip", "r_hip", "l_knee", "r_knee", "l_ankle", "r_ankle",
)


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrices for a (..., 3) array of vectors."""
    v = np.asarray(v, dtype=float)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    o = np.zeros_like(x)
    return np.stack([o, -z, y, z, o, -x, -y, x, o], axis=-1).reshape(v.shape[:-1] + (3, 3))


def _series_coeffs(angle):
    """sin(t)/t, (1-cos t)/t^2, (t-sin t)/t^3 with Taylor fallbacks near 0."""
    small = angle < 1e-6
    t = np.where(small, 1.0, angle)
    t2 = angle * angle
    sin_t = np.sin(t)
    a = np.where(small, 1.0 - t2 / 6.0, sin_t / t)
    b = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(t)) / (t * t))
    c = np.where(small, 1.0 / 6.0 - t2 / 120.0, (t - sin_t) / (t * t * t))
    return a, b, c


def rotation_matrices(rotvecs: np.ndarray) -> np.ndarray:
    """Rodrigues' formula, vectorised over leading axes.

    Uses K^2 = v v^T - |v|^2 I, so R = cos(t) I + a K + b v v^T.
    """
    v = np.asarray(rotvecs, dtype=float)
    t2 = (v * v).sum(axis=-1)
    angle = np.sqrt(t2)
    # sin(t)/t and (1-cos t)/t^2 via sinc, exact at t = 0 without branching
    a = np.sinc(angle / np.pi)
    half = np.sinc(angle / (2.0 * np.pi))
    b = 0.5 * half * half
    R = (b[..., None] * v)[..., :, None] * v[..., None, :]
    av = a[..., None] * v
    cos_t = 1.0 - b * t2
    R[..., 0, 0] += cos_t
    R[..., 1, 1] += cos_t
    R[..., 2, 2] += cos_t
    R[..., 0, 1] -= av[..., 2]
    R[..., 1, 0] += av[..., 2]
    R[..., 0, 2] += av[..., 1]
    R[..., 2, 0] -= av[..., 1]
    R[..., 1, 2] -= av[..., 0]
    R[..., 2, 1] += av[..., 0]
    return R


def left_jacobians(rotvecs: np.ndarray) -> np.ndarray:
    """Left Jacobian of SO(3): d exp(w + e) ~ exp(J_l(w) e) exp(w)."""
    rotvecs = np.asarray(rotvecs, dtype=float)
    angle = np.linalg.norm(rotvecs, axis=-1)[..., None, None]
    _, b, c = _series_coeffs(angle)
    K = hat(rotvecs)
    return np.eye(3) + b * K + c * (K @ K)


def _readonly(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Skeleton:
    """Joint tree with bone lengths (mm) and unit rest directions.

    ``rest_direction[j]`` is the bone from ``parent[j]`` to ``j`` expressed
    in the parent's frame. Parents must precede their children.
    """

    joint_names: tuple[str, ...]
    parent: tuple[int, ...]
    bone_length: np.ndarray
    rest_direction: np.ndarray
    children: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)
    # (joints, parents, offsets (n, 3, 1)) per tree depth below the root, for level-wise FK
    levels: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        J = len(self.joint_names)
        object.__setattr__(self, "bone_length", _readonly(self.bone_length))
        object.__setattr__(self, "rest_direction", _readonly(self.rest_direction))
        if len(self.parent) != J or self.bone_length.shape != (J,) or self.rest_direction.shape != (J, 3):
            raise ContractError("skeleton arrays disagree on joint count")
        if J < 15:
            raise ContractError(f"skeleton needs at least 15 joints, got {J}")
        if len(set(self.joint_names)) != J:
            raise ContractError("duplicate joint names")
        roots = [j for j, p in enumerate(self.parent) if p == ROOT_PARENT]
        if roots != [0]:
            raise ContractError("joint 0 must be the single root")
        for j in range(1, J):
            if not 0 <= self.parent[j] < j:
                raise ContractError(f"joint {self.joint_names[j]!r}: parent must precede child")
            if not self.bone_length[j] > 0:
                raise ContractError(f"joint {self.joint_names[j]!r}: bone length must be positive")
        if self.bone_length[0] != 0:
            raise ContractError("root bone length must be 0")
        norms = np.linalg.norm(self.rest_direction, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ContractError("rest directions must have unit norm")
        kids = [[] for _ in range(J)]
        for j in range(1, J):
            kids[self.parent[j]].append(j)
        object.__setattr__(self, "children", tuple(tuple(k) for k in kids))
        depth = [0] * J
        for j in range(1, J):
            depth[j] = depth[self.parent[j]] + 1
        levels = []
        offsets = self.bone_length[:, None] * self.rest_direction
        for lv in range(1, max(depth) + 1):
            js = np.array([j for j in range(J) if depth[j] == lv], dtype=int)
            levels.append((js, np.array([self.parent[j] for j in js], dtype=int), offsets[js][:, :, None]))
        object.__setattr__(self, "levels", tuple(levels))

    @property
    def joint_count(self) -> int:
        return len(self.joint_names)

    def index(self, name: str) -> int:
        try:
            return self.joint_names.index(name)
        except ValueError:
            raise ContractError(f"unknown joint {name!r}") from None

    def indices(self, names: Sequence[str]) -> np.ndarray:
        return np.array([self.index(n) for n in names], dtype=int)

    @property
    def offsets(self) -> np.ndarray:
        """Bone vectors in parent frames, (J, 3)."""
        return self.bone_length[:, None] * self.rest_direction

    def with_lengths(self, lengths) -> "Skeleton":
        lengths = np.array(lengths, dtype=float)
        lengths[0] = 0.0
        return Skeleton(self.joint_names, self.parent, lengths, self.rest_direction)

    def scaled(self, factor: float) -> "Skeleton":
        return self.with_lengths(self.bone_length * factor)

    def rest_pose(self) -> np.ndarray:
        """Root-relative rest positions, (J, 3)."""
        return forward_kinematics(self, Pose.zero(self.joint_count))

    def height(self) -> float:
        y = self.rest_pose()[:, 1]
        return float(y.max() - y.min())

    def knee_neck_height(self) -> float:
        rest = self.rest_pose()
        knees = rest[self.indices(["l_knee", "r_knee"]), 1].mean()
        return float(knees - rest[self.index("neck"), 1])

    def descendants_mask(self) -> np.ndarray:
        """mask[k, j] is True when joint j lies strictly below joint k."""
        J = self.joint_count
        mask = np.zeros((J, J), dtype=bool)
        for j in range(1, J):
            p = self.parent[j]
            mask[:, j] = mask[:, p]
            mask[p, j] = True
        return mask

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        # a list, not a mapping: joint order is meaningful and must survive sort_keys
        joints = []
        for j, name in enumerate(self.joint_names):
            p = self.parent[j]
            joints.append({
                "name": name,
                "parent": None if p == ROOT_PARENT else self.joint_names[p],
                "length_mm": float(self.bone_length[j]),
                "rest_direction": [float(x) for x in self.rest_direction[j]],
            })
        return {"root": self.joint_names[0], "units": "mm", "joints": joints}

    @classmethod
    def from_dict(cls, data: dict) -> "Skeleton":
        """Accepts ``joints`` as an ordered list of records or a name-keyed mapping."""
        try:
            joints = data["joints"]
            if isinstance(joints, list):
                items = [(spec["name"], spec) for spec in joints]
            else:
                items = list(joints.items())
            names = tuple(name for name, _ in items)
            lookup = {n: i for i, n in enumerate(names)}
            parent = tuple(
                ROOT_PARENT if spec.get("parent") is None else lookup[spec["parent"]] for _, spec in items
            )
            lengths = [float(spec.get("length_mm", 0.0)) for _, spec in items]
            dirs = [spec["rest_direction"] for _, spec in items]
        except (KeyError, TypeError, AttributeError) as exc:
            raise ConfigError(f"malformed skeleton definition: {exc!r}") from exc
        if data.get("root", names[0]) != names[0]:
            raise ConfigError("the root joint must be listed first")
        try:
            return cls(names, parent, lengths, dirs)
        except ContractError as exc:
            raise ConfigError(str(exc)) from exc


def load_skeleton(path: str | Path | None = None) -> Skeleton:
    """Load a skeleton definition; ``None`` returns the shipped default."""
    if path is None:
        text = resources.files("posefit.data").joinpath("default_skeleton.json").read_text()
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read skeleton file {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"skeleton file is not valid JSON: {exc}") from exc
    return Skeleton.from_dict(data)


def default_skeleton() -> Skeleton:
    return load_skeleton(None)


@dataclass(frozen=True)
class Pose:
    """Per-joint exponential-map rotations (J, 3) plus root translation (mm)."""

    theta: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        theta = _readonly(self.theta)
        d = _readonly(self.d)
        if theta.ndim != 2 or theta.shape[1] != 3 or d.shape != (3,):
            raise ContractError(f"bad pose shapes theta={theta.shape} d={d.shape}")
        if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(d))):
            raise ContractError("pose contains non-finite values")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "d", d)

    @classmethod
    def zero(cls, joint_count: int, d=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(np.zeros((joint_count, 3)), np.asarray(d, dtype=float))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.theta.ravel(), self.d])

    @classmethod
    def from_vector(cls, x, joint_count: int) -> "Pose":
        x = np.asarray(x, dtype=float)
        return cls(x[: 3 * joint_count].reshape(joint_count, 3), x[3 * joint_count:])

    def to_dict(self) -> dict:
        return {"theta": self.theta.tolist(), "d": self.d.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "Pose":
        return cls(np.asarray(data["theta"], dtype=float), np.asarray(data["d"], dtype=float))


@dataclass(frozen=True)
class LocalPose3D:
    """Root-relative joint positions in mm, root exactly at the origin."""

    positions: np.ndarray

    def __post_init__(self):
        p = np.array(self.positions, dtype=float)
        if p.ndim != 2 or p.shape[1] != 3:
            raise ContractError(f"bad local pose shape {p.shape}")
        p = p - p[0]
        p[0] = 0.0
        p.setflags(write=False)
        object.__setattr__(self, "positions", p)


def forward_kinematics_batch(skeleton: Skeleton, theta: np.ndarray, d: np.ndarray):
    """FK for a batch of poses.

    theta: (B, J, 3), d: (B, 3). Returns (positions (B, J, 3), global
    rotations (B, J, 3, 3)).
    """
    J = skeleton.joint_count
    if theta.shape[-2:] != (J, 3):
        raise ContractError(f"pose has {theta.shape[-2]} joints, skeleton has {J}")
    local = rotation_matrices(theta)
    B = theta.shape[0]
    R = np.empty((B, J, 3, 3))
    P = np.empty((B, J, 3))
    R[:, 0] = local[:, 0]
    P[:, 0] = d
    # all joints at one depth share a single batched product
    for js, ps, off in skeleton.levels:
        Rp = R[:, ps]
        R[:, js] = Rp @ local[:, js]
        P[:, js] = P[:, ps] + (Rp @ off)[..., 0]
    return P, R


def forward_kinematics(skeleton: Skeleton, pose: Pose) -> np.ndarray:
    """Camera-space joint positions (J, 3) in mm."""
    if pose.theta.shape[0] != skeleton.joint_count:
        raise ContractError(
            f"pose has {pose.theta.shape[0]} joints, skeleton has {skeleton.joint_count}"
        )
    P, _ = forward_kinematics_batch(skeleton, pose.theta[None], pose.d[None])
    return P[0]


def local_pose_from_global(skeleton: Skeleton, pose: Pose) -> LocalPose3D:
    return LocalPose3D(forward_kinematics(skeleton, pose))


def bone_lengths_of(skeleton: Skeleton, positions: np.ndarray) -> np.ndarray:
    """Per-joint distance to parent for a (..., J, 3) array; root entry 0."""
    positions = np.asarray(positions, dtype=float)
    parent = np.array(skeleton.parent)
    parent[0] = 0
    return np.linalg.norm(positions - positions[..., parent, :], axis=-1)


def calibrate(predictions, user_height_mm: float, template: Skeleton | None = None) -> Skeleton:
    """Average per-bone lengths over predictions, then rescale to the user's height.

    Predictions are height-normalized root-relative poses; only the bone
    proportions matter since the result is rescaled so the rest pose is
    ``user_height_mm`` tall from head top to the lowest foot joint.
    """
    if template is None:
        template = default_skeleton()
    preds = [p.positions if isinstance(p, LocalPose3D) else np.asarray(p, dtype=float) for p in predictions]
    if not preds:
        raise ContractError("calibration needs at least one prediction")
    if not user_height_mm > 0:
        raise ContractError("user height must be positive")
    stack = np.stack(preds)
    if stack.shape[1:] != (template.joint_count, 3):
        raise ContractError(f"prediction shape {stack.shape[1:]} does not match skeleton")
    lengths = bone_lengths_of(template, stack).mean(axis=0)
    averaged = template.with_lengths(lengths)
    return averaged.scaled(user_height_mm / averaged.height())
