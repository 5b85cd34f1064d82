"""Skeleton fitting: retargeting and per-frame damped least squares.

The fitted energy is a sum of squared residual blocks, each block scaled by
the square root of its weight:

* ik     -- root-relative FK positions vs the retargeted 3D prediction (mm)
* proj   -- projected FK positions vs the 2D keypoints (px)
* smooth -- second difference of FK positions over the last two fits (mm)
* depth  -- first difference of FK depth over the last fit (mm)
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import CameraModel, backproject
from .errors import ContractError
from .posemaps import Keypoints2D
from .skeleton import (
    LocalPose3D,
    Pose,
    Skeleton,
    forward_kinematics_batch,
    left_jacobians,
)

MIN_VISIBLE = 4
DEPTH_EPS_MM = 1.0
LAMBDA_INIT = 1e-3
LAMBDA_MAX = 1e12
GRAD_TOL = 1e-6
STEP_TOL = 1e-8
ENERGY_RTOL = 1e-6
MAX_ITERS = 50
NUMERIC_STEP = 1e-6


@dataclass(frozen=True)
class EnergyWeights:
    w_ik: float = 1.0
    w_proj: float = 44.0
    w_smooth: float = 0.07
    w_depth: float = 0.11

    def __post_init__(self):
        if min(self.w_ik, self.w_proj, self.w_smooth, self.w_depth) < 0:
            raise ContractError("energy weights must be non-negative")


@dataclass(frozen=True)
class Observations:
    """2D keypoints in full-frame px and the retargeted root-relative 3D pose."""

    keypoints: Keypoints2D
    local_pose: LocalPose3D
    local_visible: np.ndarray | None = None

    @property
    def ik_mask(self) -> np.ndarray:
        if self.local_visible is None:
            return np.asarray(self.keypoints.visible, dtype=bool)
        return np.asarray(self.local_visible, dtype=bool)


@dataclass
class FitContext:
    skeleton: Skeleton
    camera: CameraModel
    history: tuple = ()  # FK positions of previous fits, most recent first
    frame_interval: float = 1.0 / 30.0

    def __post_init__(self):
        if not self.frame_interval > 0:
            raise ContractError("frame interval must be positive")

    def pushed(self, positions: np.ndarray) -> "FitContext":
        return FitContext(self.skeleton, self.camera, (positions,) + tuple(self.history[:1]), self.frame_interval)


@dataclass
class FitResult:
    pose: Pose
    energy: float
    terms: dict
    iterations: int
    reason: str
    flags: list = field(default_factory=list)
    energy_trace: list = field(default_factory=list)


def _align(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rotation taking unit vector a onto unit vector b."""
    v = np.cross(a, b)
    c = float(np.dot(a, b))
    if c < -1.0 + 1e-12:
        axis = np.cross(a, [1.0, 0.0, 0.0])
        if np.linalg.norm(axis) < 1e-6:
            axis = np.cross(a, [0.0, 1.0, 0.0])
        axis /= np.linalg.norm(axis)
        return 2.0 * np.outer(axis, axis) - np.eye(3)
    K = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
    return np.eye(3) + K + K @ K / (1.0 + c)


def retarget(local_pose: LocalPose3D, skeleton: Skeleton, visible=None, eps_mm: float = 1e-9):
    """Keep each predicted bone direction, impose the skeleton's bone lengths.

    Returns ``(LocalPose3D, flagged)`` where ``flagged`` marks joints whose
    direction was unusable (zero length or missing endpoint) and was
    replaced by the rest direction carried along the parent bone.
    """
    src = local_pose.positions
    J = skeleton.joint_count
    if src.shape != (J, 3):
        raise ContractError(f"local pose has shape {src.shape}, skeleton has {J} joints")
    vis = np.ones(J, dtype=bool) if visible is None else np.asarray(visible, dtype=bool)
    out = np.zeros((J, 3))
    frames = np.zeros((J, 3, 3))
    frames[0] = np.eye(3)
    flagged = np.zeros(J, dtype=bool)
    for j in range(1, J):
        p = skeleton.parent[j]
        rest = skeleton.rest_direction[j]
        bone = src[j] - src[p]
        n = np.linalg.norm(bone)
        if n <= eps_mm or not (vis[j] and vis[p]) or flagged[p]:
            direction = frames[p] @ rest
            flagged[j] = True
        else:
            direction = bone / n
        out[j] = out[p] + skeleton.bone_length[j] * direction
        # approximate frame of j: parent frame turned onto this bone
        frames[j] = _align(frames[p] @ rest, direction) @ frames[p]
    return LocalPose3D(out), flagged


def _swing_basis(axis: np.ndarray) -> np.ndarray:
    """Orthonormal (3, 2) basis of the plane perpendicular to ``axis``."""
    a = axis / np.linalg.norm(axis)
    u = np.cross(a, np.eye(3)[np.argmin(np.abs(a))])
    u /= np.linalg.norm(u)
    return np.stack([u, np.cross(a, u)], axis=1)


def _block_diag(blocks) -> np.ndarray:
    out = np.zeros((sum(b.shape[0] for b in blocks), sum(b.shape[1] for b in blocks)))
    r = c = 0
    for b in blocks:
        out[r:r + b.shape[0], c:c + b.shape[1]] = b
        r += b.shape[0]
        c += b.shape[1]
    return out


class FrameProblem:
    """Residuals and Jacobians of one frame's energy over the active parameters.

    Parameters are the rotations of joints that have children plus the root
    translation; leaf rotations cannot move any joint and stay fixed. A joint
    with a single child gets two swing parameters (rotation axes normal to
    the child bone): a twist about that bone can always be handed down to
    the child, so joint positions cannot observe it, and a free twist would
    leave the angles undetermined.
    """

    def __init__(self, obs: Observations, weights: EnergyWeights, ctx: FitContext, base: Pose):
        sk = ctx.skeleton
        J = sk.joint_count
        self.sk, self.cam, self.weights = sk, ctx.camera, weights
        self.base = base.as_vector()
        self.active_joints = np.array([k for k in range(J) if sk.children[k]], dtype=int)
        # full-vector indices of the active coordinates, three per active joint then d
        self.cols = np.concatenate([(3 * self.active_joints[:, None] + np.arange(3)).ravel(), 3 * J + np.arange(3)])
        blocks = []
        for k in self.active_joints:
            kids = sk.children[k]
            if len(kids) == 1:
                blocks.append(_swing_basis(sk.rest_direction[kids[0]]))
            else:
                blocks.append(np.eye(3))
        blocks.append(np.eye(3))
        # active coordinates = reduce @ params + the fixed twist held in offset
        self.reduce = _block_diag(blocks)
        self.offset = self.base.copy()
        b = self.base[self.cols]
        self.offset[self.cols] = b - self.reduce @ (self.reduce.T @ b)
        self.desc = sk.descendants_mask()[self.active_joints]
        self.parents_of_active = np.array([sk.parent[k] for k in self.active_joints])

        kp_vis = np.asarray(obs.keypoints.visible, dtype=bool)
        ik_vis = obs.ik_mask.copy()
        ik_vis[0] = False  # root residual is identically zero
        self.ik_idx = np.flatnonzero(ik_vis) if weights.w_ik > 0 else np.zeros(0, int)
        self.proj_idx = np.flatnonzero(kp_vis) if weights.w_proj > 0 else np.zeros(0, int)
        self.target_ik = obs.local_pose.positions[self.ik_idx]
        self.target_uv = np.asarray(obs.keypoints.uv, dtype=float)[self.proj_idx]
        hist = ctx.history
        self.smooth_on = len(hist) >= 2 and weights.w_smooth > 0
        self.depth_on = len(hist) >= 1 and weights.w_depth > 0
        if self.smooth_on:
            self.smooth_ref = 2.0 * hist[0] - hist[1]
        if self.depth_on:
            self.depth_ref = hist[0][:, 2]
        self.s_ik, self.s_proj = np.sqrt(weights.w_ik), np.sqrt(weights.w_proj)
        self.s_smooth, self.s_depth = np.sqrt(weights.w_smooth), np.sqrt(weights.w_depth)
        self.clamped = False
        self._last_fk = None  # (x, P, R) of the latest single-vector evaluation

    @property
    def n_params(self) -> int:
        return self.reduce.shape[1]

    def full_vector(self, x_active: np.ndarray) -> np.ndarray:
        x = np.broadcast_to(self.offset, x_active.shape[:-1] + self.offset.shape).copy()
        x[..., self.cols] += x_active @ self.reduce.T
        return x

    def initial(self) -> np.ndarray:
        return self.reduce.T @ self.base[self.cols]

    def pose(self, x_active) -> Pose:
        return Pose.from_vector(self.full_vector(np.asarray(x_active)), self.sk.joint_count)

    def _fk(self, X: np.ndarray):
        J = self.sk.joint_count
        full = self.full_vector(X)
        return forward_kinematics_batch(self.sk, full[:, : 3 * J].reshape(-1, J, 3), full[:, 3 * J:])

    def _blocks(self, P: np.ndarray) -> list:
        """Residual blocks for a batch of FK positions (B, J, 3)."""
        blocks = []
        if len(self.ik_idx):
            rel = P[:, self.ik_idx] - P[:, :1]
            blocks.append(("ik", self.s_ik * (rel - self.target_ik).reshape(len(P), -1)))
        if len(self.proj_idx):
            pts = P[:, self.proj_idx]
            z = pts[..., 2]
            clamp = z < DEPTH_EPS_MM
            self.clamped |= bool(np.any(clamp))
            z = np.where(clamp, DEPTH_EPS_MM, z)
            uv = self.cam.focal_px * pts[..., :2] / z[..., None] + np.asarray(self.cam.principal_point)
            blocks.append(("proj", self.s_proj * (uv - self.target_uv).reshape(len(P), -1)))
        if self.smooth_on:
            blocks.append(("smooth", self.s_smooth * (P - self.smooth_ref).reshape(len(P), -1)))
        if self.depth_on:
            blocks.append(("depth", self.s_depth * (P[..., 2] - self.depth_ref)))
        return blocks

    def residuals(self, X: np.ndarray) -> np.ndarray:
        """Stacked residuals for a batch (B, n) of active-parameter vectors."""
        X = np.atleast_2d(X)
        P, R = self._fk(X)
        if len(X) == 1:
            self._last_fk = (X[0].copy(), P[0], R[0])
        blocks = self._blocks(P)
        if not blocks:
            return np.zeros((P.shape[0], 0))
        return np.concatenate([b for _, b in blocks], axis=1)

    def terms(self, x: np.ndarray) -> dict:
        P, _ = self._fk(np.atleast_2d(x))
        out = {"ik": 0.0, "proj": 0.0, "smooth": 0.0, "depth": 0.0}
        for name, block in self._blocks(P):
            out[name] = float(block[0] @ block[0])
        return out

    def jacobian_numeric(self, x: np.ndarray, h: float = NUMERIC_STEP) -> np.ndarray:
        n = len(x)
        steps = np.eye(n) * h
        X = np.concatenate([x + steps, x - steps])
        R = self.residuals(X)
        return ((R[:n] - R[n:]) / (2.0 * h)).T

    def position_jacobian(self, x: np.ndarray):
        """FK positions (J, 3) and their derivative (J, 3, n) w.r.t. active params."""
        last = self._last_fk
        if last is not None and np.array_equal(last[0], x):
            P, R = last[1], last[2]
        else:
            P, R = self._fk(x[None])
            P, R = P[0], R[0]
        J = self.sk.joint_count
        full = self.full_vector(x)
        theta = full[: 3 * J].reshape(J, 3)[self.active_joints]
        parent_rot = np.where(
            (self.parents_of_active >= 0)[:, None, None], R[np.maximum(self.parents_of_active, 0)], np.eye(3)
        )
        axes = parent_rot @ left_jacobians(theta)  # (K, 3, 3), columns are axes
        rel = (P[None, :, :] - P[self.active_joints][:, None, :]) * self.desc[:, :, None]  # (K, J, 3)
        a = np.swapaxes(axes, 1, 2)[:, :, None, :]  # (K, 3, 1, 3)
        b = rel[:, None, :, :]  # (K, 1, J, 3)
        cross = np.stack([
            a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
            a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
            a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0],
        ], axis=-1)  # (K, 3, J, 3)
        K = len(self.active_joints)
        dP = np.empty((J, 3, 3 * K + 3))
        dP[:, :, : 3 * K] = cross.transpose(2, 3, 0, 1).reshape(J, 3, 3 * K)
        dP[:, :, 3 * K:] = np.eye(3)
        return P, dP @ self.reduce

    def jacobian_analytic(self, x: np.ndarray) -> np.ndarray:
        P, dP = self.position_jacobian(x)
        rows = []
        if len(self.ik_idx):
            rows.append(self.s_ik * (dP[self.ik_idx] - dP[:1]).reshape(-1, dP.shape[2]))
        if len(self.proj_idx):
            pts = P[self.proj_idx]
            z = pts[:, 2]
            clamp = z < DEPTH_EPS_MM
            zc = np.where(clamp, DEPTH_EPS_MM, z)
            f = self.cam.focal_px
            dproj = np.zeros((len(pts), 2, 3))
            dproj[:, 0, 0] = f / zc
            dproj[:, 1, 1] = f / zc
            dproj[:, 0, 2] = np.where(clamp, 0.0, -f * pts[:, 0] / zc ** 2)
            dproj[:, 1, 2] = np.where(clamp, 0.0, -f * pts[:, 1] / zc ** 2)
            rows.append(self.s_proj * np.einsum("jab,jbn->jan", dproj, dP[self.proj_idx]).reshape(-1, dP.shape[2]))
        if self.smooth_on:
            rows.append(self.s_smooth * dP.reshape(-1, dP.shape[2]))
        if self.depth_on:
            rows.append(self.s_depth * dP[:, 2, :])
        if not rows:
            return np.zeros((0, dP.shape[2]))
        return np.concatenate(rows, axis=0)


def visible_count(obs: Observations) -> int:
    return int(np.count_nonzero(np.asarray(obs.keypoints.visible) | obs.ik_mask))


def energy(pose: Pose, obs: Observations, weights: EnergyWeights, ctx: FitContext):
    """Total energy, stacked residual vector and per-term energies."""
    if pose.theta.shape[0] != ctx.skeleton.joint_count:
        raise ContractError("pose does not match skeleton")
    if visible_count(obs) < MIN_VISIBLE:
        raise ContractError(f"need at least {MIN_VISIBLE} visible joints")
    prob = FrameProblem(obs, weights, ctx, pose)
    x = prob.initial()
    r = prob.residuals(x[None])[0]
    return float(r @ r), r, prob.terms(x)


def initial_pose(skeleton: Skeleton, camera: CameraModel, keypoints: Keypoints2D, depth_mm: float | None = None) -> Pose:
    """Rest pose with its root on the ray through the root keypoint.

    Without an explicit depth, the depth is taken from the ratio of the
    skeleton's rest height to the keypoints' vertical extent.
    """
    vis = np.asarray(keypoints.visible, dtype=bool)
    uv = np.asarray(keypoints.uv, dtype=float)
    root_uv = uv[0] if vis[0] else uv[vis].mean(axis=0)
    if depth_mm is None:
        extent = np.ptp(uv[vis, 1]) if vis.sum() >= 2 else 0.0
        depth_mm = camera.focal_px * skeleton.height() / extent if extent > 1.0 else 3000.0
    d = backproject(camera, root_uv, depth_mm)
    return Pose.zero(skeleton.joint_count, d)


def fit_frame(obs: Observations, weights: EnergyWeights, ctx: FitContext, init: Pose, jacobian: str = "analytic",
              max_iters: int = MAX_ITERS) -> FitResult:
    """Levenberg-Marquardt with Marquardt diagonal scaling.

    Stops when the gradient infinity-norm drops below 1e-6, the step norm
    below 1e-8, an accepted step lowers the energy by less than 1e-6 of its
    value, or after ``max_iters`` iterations. Rejected steps never
    change the iterate, so accepted energies are non-increasing.
    """
    if visible_count(obs) < MIN_VISIBLE:
        e = float("nan")
        return FitResult(init, e, {}, 0, "rejected", ["too_few_joints"])
    prob = FrameProblem(obs, weights, ctx, init)
    jac = prob.jacobian_analytic if jacobian == "analytic" else prob.jacobian_numeric
    x = prob.initial()
    r = prob.residuals(x[None])[0]
    e = float(r @ r)
    lam = LAMBDA_INIT
    trace = [e]
    flags: list[str] = []
    reason = "max_iters"
    it = 0
    A = g = None
    while it < max_iters:
        if A is None:
            Jm = jac(x)
            A = Jm.T @ Jm
            g = Jm.T @ r
            diag = np.maximum(np.diag(A), 1e-12 * max(np.max(np.diag(A)), 1.0))
        if np.max(np.abs(g), initial=0.0) < GRAD_TOL:
            reason = "gradient"
            break
        it += 1
        try:
            step = np.linalg.solve(A + lam * np.diag(diag), -g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(A + lam * np.diag(diag), -g, rcond=None)[0]
        if np.linalg.norm(step) < STEP_TOL:
            reason = "step"
            break
        x_new = x + step
        r_new = prob.residuals(x_new[None])[0]
        e_new = float(r_new @ r_new)
        if np.isfinite(e_new) and e_new < e:
            small = e - e_new <= ENERGY_RTOL * e
            x, r, e = x_new, r_new, e_new
            lam = max(lam / 10.0, 1e-15)
            trace.append(e)
            A = None
            if small:
                reason = "energy"
                break
        else:
            lam *= 10.0
            if lam > LAMBDA_MAX:
                reason = "diverged"
                flags.append("solver_diverged")
                break
    if prob.clamped:
        flags.append("behind_camera")
    return FitResult(prob.pose(x), e, prob.terms(x), it, reason, flags, trace)
