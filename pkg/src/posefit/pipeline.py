"""Per-stream tracking: box tracking, decoding, filtering, retargeting, fitting.

Frame flow::

    maps --decode--> K (crop px) --crop^-1--> K (frame px) --1-Euro--> K~
    K~ --crop--> read location-maps --> P^L --1-Euro--> retarget --> fit --> FK --1-Euro--> output

The next frame's box comes from the unfiltered decoded keypoints.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator

import numpy as np

from .bbox import BoundingBox, BoxParams, CropTransform, buffered_box, clamp_to_frame, propose
from .camera import CameraModel
from .errors import ContractError
from .filters import FRAME_RATE_HZ, OneEuroFilter, OneEuroParams, default_params
from .fitting import (
    MAX_ITERS,
    EnergyWeights,
    FitContext,
    Observations,
    fit_frame,
    initial_pose,
    retarget,
)
from .oracle import GroundTruthFrame, NoiseSpec, Observation, observe
from .posemaps import GRID, Keypoints2D, MapStack, decode, decode_at, lookup_cells
from .skeleton import (
    NORMALIZED_KNEE_NECK_MM,
    LocalPose3D,
    Pose,
    Skeleton,
    calibrate,
    forward_kinematics,
)

# flags raised by the solver itself; data-quality flags are not counted
SOLVER_FLAGS = ("too_few_joints", "solver_diverged", "behind_camera")


@dataclass(frozen=True)
class TrackConfig:
    weights: EnergyWeights = field(default_factory=EnergyWeights)
    filter_keypoints: bool = True
    filter_local3d: bool = True
    filter_global3d: bool = True
    keypoint_params: OneEuroParams = field(default_factory=lambda: default_params("keypoints"))
    local3d_params: OneEuroParams = field(default_factory=lambda: default_params("local3d"))
    global3d_params: OneEuroParams = field(default_factory=lambda: default_params("global3d"))
    gt_2d_lookup: bool = False
    jacobian: str = "analytic"
    max_iters: int = MAX_ITERS
    fps: float = FRAME_RATE_HZ
    init_depth_mm: float | None = None

    def without_filters(self) -> "TrackConfig":
        return replace(self, filter_keypoints=False, filter_local3d=False, filter_global3d=False)

    def without_ik(self) -> "TrackConfig":
        return replace(self, weights=replace(self.weights, w_ik=0.0))


@dataclass
class FrameResult:
    index: int
    timestamp: float
    pose: Pose
    fitted_positions: np.ndarray  # camera space, straight from the fit
    positions: np.ndarray  # camera space, after the global 1-Euro stage
    keypoints: Keypoints2D  # decoded, full frame, unfiltered
    raw_local: np.ndarray  # decoded P^L at the argmax, normalized scale
    energy: float
    terms: dict
    iterations: int
    reason: str
    flags: list
    timings: dict

    def diagnostics(self) -> dict:
        return {
            "frame": self.index,
            "timestamp": self.timestamp,
            "energy": self.energy,
            "terms": self.terms,
            "iterations": self.iterations,
            "termination": self.reason,
            "flags": self.flags,
            "timings_ms": {k: v * 1e3 for k, v in self.timings.items()},
        }


def _expand(mask: np.ndarray, lanes: int) -> np.ndarray:
    return np.repeat(np.asarray(mask, dtype=bool), lanes)


class Tracker:
    """Stateful tracker for one stream; feed frames in order from one thread."""

    def __init__(self, skeleton: Skeleton, camera: CameraModel, config: TrackConfig | None = None):
        self.skeleton = skeleton
        self.camera = camera
        self.config = config or TrackConfig()
        J = skeleton.joint_count
        c = self.config
        self._kp_filter = OneEuroFilter(c.keypoint_params, 2 * J)
        self._local_filter = OneEuroFilter(c.local3d_params, 3 * J)
        self._global_filter = OneEuroFilter(c.global3d_params, 3 * J)
        self._ctx = FitContext(skeleton, camera, (), 1.0 / c.fps)
        self._pose: Pose | None = None
        self._frame = 0
        self._scale = skeleton.knee_neck_height() / NORMALIZED_KNEE_NECK_MM

    @property
    def last_pose(self) -> Pose | None:
        return self._pose

    def step(self, maps: MapStack, crop: CropTransform, timestamp: float | None = None,
             gt_keypoints_crop: Keypoints2D | None = None) -> FrameResult:
        c = self.config
        J = self.skeleton.joint_count
        if maps.joint_count != J:
            raise ContractError(f"map stack has {maps.joint_count} joints, skeleton has {J}")
        t = self._frame / c.fps if timestamp is None else float(timestamp)
        timings = {}
        flags: list[str] = []

        t0 = time.perf_counter()
        kp_crop, raw_local = decode(maps)
        kp_frame = crop.keypoints_to_frame(kp_crop)
        vis = np.asarray(kp_crop.visible, dtype=bool)
        timings["decode"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        uv = kp_frame.uv
        if c.filter_keypoints:
            uv = self._kp_filter(uv, t, _expand(vis, 2))
        filtered_kp = kp_frame.with_uv(uv)
        timings["filter_2d"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        if c.gt_2d_lookup and gt_keypoints_crop is not None:
            lookup_uv = gt_keypoints_crop.uv
            local_vis = vis & np.asarray(gt_keypoints_crop.visible, dtype=bool)
        else:
            lookup_uv = crop.to_crop(filtered_kp.uv)
            local_vis = vis
        _, clamped = lookup_cells(maps, lookup_uv)
        if np.any(clamped & local_vis):
            flags.append("lookup_clamped")
        local = decode_at(maps, lookup_uv).positions
        timings["decode"] += time.perf_counter() - t0

        t0 = time.perf_counter()
        if c.filter_local3d:
            local = self._local_filter(local, t, _expand(local_vis, 3))
        timings["filter_3d_local"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        target, bad = retarget(LocalPose3D(local), self.skeleton, local_vis)
        timings["retarget"] = time.perf_counter() - t0
        if np.any(bad & local_vis):
            flags.append("retarget_substituted")

        obs = Observations(filtered_kp, target, local_vis & ~bad)
        init = self._pose
        if init is None:
            init = initial_pose(self.skeleton, self.camera, filtered_kp, c.init_depth_mm)
        t0 = time.perf_counter()
        fit = fit_frame(obs, c.weights, self._ctx, init, c.jacobian, c.max_iters)
        timings["fit"] = time.perf_counter() - t0
        flags.extend(fit.flags)

        fitted = forward_kinematics(self.skeleton, fit.pose)
        t0 = time.perf_counter()
        out = self._global_filter(fitted, t) if c.filter_global3d else fitted
        timings["filter_3d_global"] = time.perf_counter() - t0

        if fit.reason != "rejected":
            self._ctx = self._ctx.pushed(fitted)
        self._pose = fit.pose
        self._frame += 1
        return FrameResult(self._frame - 1, t, fit.pose, fitted, out, kp_frame, raw_local.positions,
                           fit.energy, fit.terms, fit.iterations, fit.reason, flags, timings)


# -- sequence level -----------------------------------------------------------

@dataclass(frozen=True)
class ObservedFrame:
    gt: GroundTruthFrame
    obs: Observation
    proposed_box: BoundingBox  # tracker box before any jitter


def bootstrap_box(keypoints_uv: np.ndarray, frame_size, box: BoxParams | None = None) -> BoundingBox:
    """First-frame box from known keypoints (stands in for a full-image search)."""
    box = box or BoxParams()
    corners = buffered_box(np.asarray(keypoints_uv), box.buffer_w, box.buffer_h)
    return BoundingBox.from_corners(clamp_to_frame(corners, frame_size))


def simulate(gt_frames: Iterable[GroundTruthFrame], skeleton: Skeleton, camera: CameraModel,
             noise: NoiseSpec, box: BoxParams | None = None) -> Iterator[ObservedFrame]:
    """Oracle observations with the box tracked from decoded keypoints, lazily.

    Box jitter perturbs only the crop handed to the oracle; the tracker keeps
    proposing from the decoded keypoints mapped back through that crop.
    """
    box = box or BoxParams()
    stride = box.crop / GRID[0]
    bb = None
    for gt in gt_frames:
        if bb is None:
            bb = bootstrap_box(gt.keypoints, camera.image_size, box)
        ob = observe(gt, bb, noise, skeleton, stride_px=stride)
        yield ObservedFrame(gt, ob, bb)
        kp_crop, _ = decode(ob.maps)
        bb, _ = propose(bb, ob.crop.keypoints_to_frame(kp_crop), camera.image_size,
                        box.momentum, box.buffer_w, box.buffer_h)


def calibrate_from_maps(maps_list, user_height_mm: float, template: Skeleton) -> Skeleton:
    return calibrate([decode(m)[1] for m in maps_list], user_height_mm, template)


def track_sequence(frames: Iterable, skeleton: Skeleton, camera: CameraModel,
                   config: TrackConfig | None = None) -> Iterator[FrameResult]:
    """Run one tracker over ``(maps, crop, timestamp, gt_keypoints_crop)`` tuples or ``ObservedFrame``s."""
    tracker = Tracker(skeleton, camera, config)
    for item in frames:
        if isinstance(item, ObservedFrame):
            yield tracker.step(item.obs.maps, item.obs.crop, item.gt.timestamp, item.obs.gt_keypoints)
        else:
            maps, crop, ts, gt_kp = item
            yield tracker.step(maps, crop, ts, gt_kp)


@dataclass
class RunOutput:
    results: list
    gt_positions: np.ndarray  # (T, J, 3) camera space
    skeleton: Skeleton

    @property
    def positions(self) -> np.ndarray:
        return np.stack([r.positions for r in self.results])

    @property
    def fitted_positions(self) -> np.ndarray:
        return np.stack([r.fitted_positions for r in self.results])

    @property
    def raw_local(self) -> np.ndarray:
        """Per-frame argmax read-off rescaled to the calibrated subject."""
        scale = self.skeleton.knee_neck_height() / NORMALIZED_KNEE_NECK_MM
        return np.stack([r.raw_local for r in self.results]) * scale

    @property
    def flagged_frames(self) -> int:
        return count_solver_flagged(self.results)


def count_solver_flagged(results) -> int:
    return sum(1 for r in results if any(f in SOLVER_FLAGS for f in r.flags))


def run_online(gt_frames: list, gt_skeleton: Skeleton, camera: CameraModel, noise: NoiseSpec,
               config: TrackConfig | None = None, user_height_mm: float | None = None,
               calibration_frames: int = 10, template: Skeleton | None = None,
               box: BoxParams | None = None) -> RunOutput:
    """Simulate observations and track them in one pass without touching disk.

    The skeleton is calibrated from the first ``calibration_frames`` decoded
    predictions and the user height (default: the subject's true height).
    """
    template = template or gt_skeleton
    height = gt_skeleton.height() if user_height_mm is None else user_height_mm
    stream = simulate(gt_frames, gt_skeleton, camera, noise, box)
    head = []
    for item in stream:
        head.append(item)
        if len(head) >= calibration_frames:
            break
    skeleton = calibrate_from_maps([f.obs.maps for f in head], height, template)

    def frames():
        yield from head
        yield from stream

    results = list(track_sequence(frames(), skeleton, camera, config))
    gt = np.stack([f.positions for f in gt_frames[: len(results)]])
    return RunOutput(results, gt, skeleton)
