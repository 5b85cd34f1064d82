"""Synthetic stand-in for the pose CNN.

``generate`` produces ground-truth motion from sinusoidal joint angles and a
parametric root path. ``observe`` renders the map stack a network would
output for one frame, given the crop box, optionally corrupted.

Random streams: every (seed, frame, stream) triple seeds its own PCG64
generator through ``numpy.random.SeedSequence([seed, frame, stream])``.
Streams ``0..J-1`` belong to the joints, stream ``J`` to the box jitter, so
frames can be rendered independently and in any order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .bbox import BoundingBox, CropTransform, crop_transform
from .camera import CameraModel, project
from .errors import ConfigError, ContractError
from .posemaps import GRID, SIGMA_CELLS, STRIDE_PX, Keypoints2D, MapStack, cells_of, inside_crop, render_gt
from .skeleton import NORMALIZED_KNEE_NECK_MM, LocalPose3D, Pose, Skeleton, forward_kinematics

RNG_ALGORITHM = "numpy.PCG64 seeded by SeedSequence([seed, frame, stream]); stream J = bbox jitter"


@dataclass(frozen=True)
class RootPath:
    """Root trajectory in camera space (mm).

    ``kind`` is ``static``, ``line`` (constant ``velocity`` mm/s) or
    ``circle`` (horizontal circle of ``radius`` through ``start`` with one
    revolution per ``period_s``).
    """

    kind: str = "static"
    start: tuple = (0.0, 0.0, 4000.0)
    velocity: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.0
    period_s: float = 1.0

    def at(self, t: float) -> np.ndarray:
        s = np.asarray(self.start, dtype=float)
        if self.kind == "static":
            return s
        if self.kind == "line":
            return s + t * np.asarray(self.velocity, dtype=float)
        if self.kind == "circle":
            a = 2.0 * math.pi * t / self.period_s
            # circle centre sits one radius behind the start point
            return s + self.radius * np.array([math.sin(a), 0.0, 1.0 - math.cos(a)])
        raise ConfigError(f"unknown root path {self.kind!r}")


@dataclass(frozen=True)
class MotionSpec:
    """theta_t = base + amplitude * sin(2 pi frequency t + phase), per joint and axis."""

    frames: int
    fps: float = 30.0
    base: np.ndarray | None = None
    amplitude: np.ndarray | None = None
    frequency: np.ndarray | None = None
    phase: np.ndarray | None = None
    root: RootPath = field(default_factory=RootPath)

    def __post_init__(self):
        if self.frames < 1:
            raise ContractError("motion needs at least one frame")
        if not self.fps > 0:
            raise ContractError("fps must be positive")

    def _array(self, name: str, J: int) -> np.ndarray:
        v = getattr(self, name)
        if v is None:
            return np.zeros((J, 3))
        v = np.asarray(v, dtype=float)
        if v.shape != (J, 3):
            raise ContractError(f"motion {name} has shape {v.shape}, expected {(J, 3)}")
        return v

    def theta_at(self, t: float, J: int) -> np.ndarray:
        return self._array("base", J) + self._array("amplitude", J) * np.sin(
            2.0 * math.pi * self._array("frequency", J) * t + self._array("phase", J)
        )

    def to_dict(self) -> dict:
        out = {"frames": self.frames, "fps": self.fps, "root": asdict(self.root)}
        for name in ("base", "amplitude", "frequency", "phase"):
            v = getattr(self, name)
            out[name] = None if v is None else np.asarray(v).tolist()
        return out

    @classmethod
    def from_dict(cls, data: dict, skeleton: Skeleton | None = None) -> "MotionSpec":
        """Accepts full (J, 3) arrays or a ``joints`` mapping keyed by joint name."""
        try:
            root = RootPath(**data.get("root", {}))
            arrays = {k: data.get(k) for k in ("base", "amplitude", "frequency", "phase")}
            if "joints" in data:
                if skeleton is None:
                    raise ConfigError("per-joint motion needs a skeleton")
                J = skeleton.joint_count
                for k in arrays:
                    arrays[k] = np.zeros((J, 3)) if arrays[k] is None else np.asarray(arrays[k], float)
                for name, spec in data["joints"].items():
                    j = skeleton.index(name)
                    for k in arrays:
                        if k in spec:
                            arrays[k][j] = spec[k]
            return cls(frames=int(data["frames"]), fps=float(data.get("fps", 30.0)), root=root, **arrays)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed motion spec: {exc!r}") from exc


@dataclass(frozen=True)
class NoiseSpec:
    kp_jitter_sigma_px: float = 0.0
    depth_noise_sigma_mm: float = 0.0
    outlier_prob: float = 0.0
    outlier_shift_px: float = 60.0
    bb_jitter_px: float = 0.0
    # location-maps drift away from the true value by this much per crop px
    # of distance from the joint's cell, mimicking the learned map structure
    locmap_slope_mm_per_px: float = 0.0
    seed: int = 0

    def __post_init__(self):
        sig = (self.kp_jitter_sigma_px, self.depth_noise_sigma_mm, self.outlier_shift_px, self.bb_jitter_px,
               self.locmap_slope_mm_per_px)
        if min(sig) < 0:
            raise ContractError("noise magnitudes must be non-negative")
        if not 0.0 <= self.outlier_prob <= 1.0:
            raise ContractError("outlier probability must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "NoiseSpec":
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(f"malformed noise spec: {exc}") from exc


@dataclass(frozen=True)
class GroundTruthFrame:
    index: int
    timestamp: float
    pose: Pose
    positions: np.ndarray  # camera space (J, 3)
    keypoints: np.ndarray  # full-frame px (J, 2)


def generate(spec: MotionSpec, skeleton: Skeleton, camera: CameraModel) -> list[GroundTruthFrame]:
    J = skeleton.joint_count
    frames = []
    for i in range(spec.frames):
        t = i / spec.fps
        pose = Pose(spec.theta_at(t, J), spec.root.at(t))
        pos = forward_kinematics(skeleton, pose)
        if np.any(pos[:, 2] <= 0):
            raise ContractError(f"frame {i}: joint behind the camera")
        frames.append(GroundTruthFrame(i, t, pose, pos, project(camera, pos)))
    return frames


def normalization_scale(skeleton: Skeleton) -> float:
    """Factor taking the subject's skeleton to the height-normalized one."""
    return NORMALIZED_KNEE_NECK_MM / skeleton.knee_neck_height()


def _rng(seed: int, frame: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, frame, stream])))


def jitter_box(bb: BoundingBox, amount_px: float, rng: np.random.Generator) -> BoundingBox:
    c = bb.corners + rng.uniform(-amount_px, amount_px, 4)
    x0, x1 = sorted((c[0], c[2]))
    y0, y1 = sorted((c[1], c[3]))
    return BoundingBox(x0, y0, max(x1, x0 + 1.0), max(y1, y0 + 1.0))


@dataclass(frozen=True)
class Observation:
    maps: MapStack
    gt_keypoints: Keypoints2D  # crop px
    crop: CropTransform


def observe(gt: GroundTruthFrame, bb: BoundingBox, noise: NoiseSpec, skeleton: Skeleton,
            grid=GRID, stride_px: float = STRIDE_PX, sigma_cells: float = SIGMA_CELLS) -> Observation:
    """Render the maps the network would predict for this frame and crop."""
    J = skeleton.joint_count
    if noise.bb_jitter_px > 0:
        bb = jitter_box(bb, noise.bb_jitter_px, _rng(noise.seed, gt.index, J))
    crop = crop_transform(bb, grid[0] * stride_px)
    kp_crop = crop.to_crop(gt.keypoints)
    local = LocalPose3D((gt.positions - gt.positions[0]) * normalization_scale(skeleton))

    gt_vis = inside_crop(kp_crop, grid, stride_px)
    peaks = kp_crop.copy()
    rngs = [_rng(noise.seed, gt.index, j) for j in range(J)]
    for j, rng in enumerate(rngs):
        jitter = rng.normal(0.0, 1.0, 2)
        u, angle = rng.uniform(0.0, 1.0, 2)
        peaks[j] += noise.kp_jitter_sigma_px * jitter
        if u < noise.outlier_prob:
            a = 2.0 * math.pi * angle
            peaks[j] += noise.outlier_shift_px * np.array([math.cos(a), math.sin(a)])

    maps = render_gt(Keypoints2D.from_uv(peaks, gt_vis), local, grid, stride_px, sigma_cells)
    loc = maps.locmaps
    W, H = grid
    true_cells = cells_of(kp_crop, stride_px)
    slope = noise.locmap_slope_mm_per_px * stride_px
    if slope > 0:
        loc[:, 0] += slope * (np.arange(W)[None, None, :] - true_cells[:, 0, None, None])
        loc[:, 1] += slope * (np.arange(H)[None, :, None] - true_cells[:, 1, None, None])
    if noise.depth_noise_sigma_mm > 0:
        for j, rng in enumerate(rngs):
            loc[j] += rng.normal(0.0, noise.depth_noise_sigma_mm, (3, H, W))
    loc[~maps.heatmaps.any(axis=(1, 2))] = 0.0
    return Observation(MapStack(maps.heatmaps, loc, maps.stride_px), Keypoints2D.from_uv(kp_crop, gt_vis), crop)


MAX_ROOT_SPEED_MM_S = 200.0


def default_root_path(frames: int, fps: float = 30.0, depth_mm: float = 4000.0, radius_mm: float = 300.0) -> RootPath:
    """Horizontal circle that closes exactly on the last frame.

    Short clips get a smaller circle so the walking speed stays at or below
    ``MAX_ROOT_SPEED_MM_S``; a 300-frame clip at 30 fps keeps the full radius.
    """
    period = max(frames - 1, 1) / fps
    radius = min(radius_mm, MAX_ROOT_SPEED_MM_S * period / (2.0 * math.pi))
    return RootPath("circle", (0.0, 0.0, depth_mm), radius=radius, period_s=period)


def sinusoid_motion(skeleton: Skeleton, frames: int, fps: float = 30.0, seed: int = 0,
                    max_amplitude: float = 0.3, root: RootPath | None = None,
                    max_frequency: float = 0.3, periodic: bool = False) -> MotionSpec:
    """Random smooth motion: per-joint sinusoids with slow frequencies.

    The root rotation stays small so the subject keeps facing the camera and
    leaf joints (no children, hence no observable rotation) stay still. With
    ``periodic`` every frequency is snapped to a whole number of cycles over
    the clip so the last frame repeats the first. ``root`` defaults to
    ``default_root_path``.
    """
    rng = np.random.default_rng(seed)
    J = skeleton.joint_count
    amp = rng.uniform(0.0, max_amplitude, (J, 3))
    amp[0] *= 0.3
    freq = rng.uniform(0.05, max_frequency, (J, 3))
    phase = rng.uniform(0.0, 2.0 * math.pi, (J, 3))
    leaves = [j for j in range(J) if not skeleton.children[j]]
    amp[leaves] = 0.0
    if periodic:
        span = max(frames - 1, 1) / fps
        freq = np.maximum(np.round(freq * span), 1.0) / span
    return MotionSpec(frames, fps, None, amp, freq, phase, root or default_root_path(frames, fps))
