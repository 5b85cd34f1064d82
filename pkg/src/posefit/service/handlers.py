"""Command implementations shared by the HTTP app and the in-process CLI.

Each handler takes a request model, does file I/O relative to the server's
filesystem and returns a response model. Failures raise ``PosefitError``
subclasses; callers turn those into exit codes or HTTP errors.
"""
from __future__ import annotations

import base64
import binascii
import json
import threading
import uuid
from dataclasses import replace
from pathlib import Path

import numpy as np

from .. import config as cfgmod
from ..bbox import BoundingBox, crop_transform, propose
from ..camera import CameraModel, from_vertical_fov
from ..errors import ConfigError, ContractError, DataError
from ..evaluation import errors_csv, evaluate
from ..oracle import RNG_ALGORITHM, MotionSpec, default_root_path, generate as generate_frames, sinusoid_motion
from ..pipeline import (
    FrameResult,
    Tracker,
    TrackConfig,
    calibrate_from_maps,
    count_solver_flagged,
    simulate,
    track_sequence,
)
from ..posemaps import from_bytes
from ..seqio import (
    DIAGNOSTICS,
    POSES,
    SequenceMeta,
    load_positions,
    pose_record,
    read_frames,
    read_meta,
    track_inputs,
    write_jsonl,
    write_sequence,
)
from ..skeleton import EVAL_JOINTS, Skeleton, default_skeleton, load_skeleton
from . import schemas as S

REPORT = "report.json"
TIMED_STAGES = ("decode", "filter_2d", "filter_3d_local", "retarget", "fit", "filter_3d_global")


def _config(req: S.ConfigInputs, extra: dict | None = None) -> dict:
    return cfgmod.resolve(req.config_path, req.overrides, extra)


def _track_config(cfg: dict, req) -> TrackConfig:
    base = cfgmod.track_config(cfg)
    return cfgmod.apply_flags(base, req.no_ik, req.no_filter, req.gt_2d_lookup)


def _write_json(path: Path, data) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


# -- generate ----------------------------------------------------------------

def _motion(req: S.GenerateRequest, cfg: dict, sk: Skeleton, seed: int) -> MotionSpec:
    g = cfg["generate"]
    if req.motion_path:
        data = cfgmod.load_file(req.motion_path)
        if req.frames is not None:
            data["frames"] = req.frames
        return MotionSpec.from_dict(data, sk)
    frames, fps = int(g["frames"]), float(g["fps"])
    root = default_root_path(frames, fps, float(g["depth_mm"]), float(g["radius_mm"]))
    return sinusoid_motion(sk, frames, fps, seed, float(g["max_amplitude"]), root,
                           float(g["max_frequency"]), bool(g["periodic"]))


def generate(req: S.GenerateRequest) -> S.GenerateResponse:
    extra: dict = {}
    if req.fov_deg is not None:
        extra["camera"] = {"fov_deg": req.fov_deg}
    if req.frames is not None:
        extra["generate"] = {"frames": req.frames}
    if req.noise_path:
        extra["noise"] = cfgmod.load_file(req.noise_path)
    cfg = _config(req, extra)
    if req.seed is not None:
        cfg["noise"]["seed"] = req.seed
    seed = int(cfg["noise"]["seed"])
    sk = load_skeleton(req.skeleton_path)
    cam = cfgmod.camera_model(cfg)
    noise = cfgmod.noise_spec(cfg)
    box = cfgmod.box_params(cfg)
    try:
        motion = _motion(req, cfg, sk, seed)
        gt = generate_frames(motion, sk, cam)
    except ContractError as exc:
        raise ConfigError(f"motion spec cannot be rendered: {exc}") from exc
    W, H = cam.image_size
    for f in gt:
        k = f.keypoints
        if np.any(k < 0) or np.any(k[:, 0] >= W) or np.any(k[:, 1] >= H):
            raise ConfigError(f"frame {f.index}: subject leaves the image; move the root further away")
    meta = SequenceMeta(sk, cam, motion, noise, len(gt), sk.height(), box.crop)
    n = write_sequence(req.out, meta, simulate(gt, sk, cam, noise, box))
    return S.GenerateResponse(out=str(req.out), frames=n, joints=sk.joint_count,
                              subject_height_mm=sk.height(), rng=RNG_ALGORITHM)


# -- track -------------------------------------------------------------------

def _camera_for(meta: SequenceMeta, fov_deg: float | None) -> CameraModel:
    if fov_deg is None:
        return meta.camera
    try:
        return from_vertical_fov(fov_deg, meta.camera.image_size)
    except ContractError as exc:
        raise ConfigError(str(exc)) from exc


def _template(meta: SequenceMeta, skeleton_path: str | None) -> Skeleton:
    # only the topology and rest directions are used; bone lengths are recalibrated
    sk = meta.skeleton if skeleton_path is None else load_skeleton(skeleton_path)
    if sk.joint_names != meta.skeleton.joint_names:
        raise DataError("skeleton joints do not match the sequence's map stacks")
    return sk


def _calibrated(seq_dir, template: Skeleton, cfg: dict, meta: SequenceMeta) -> Skeleton:
    cal = cfg["calibration"]
    n = int(cal["frames"])
    if n < 1:
        raise ConfigError("calibration.frames must be at least 1")
    height = meta.subject_height_mm if cal.get("user_height_mm") is None else float(cal["user_height_mm"])
    maps = []
    for f in read_frames(seq_dir):
        maps.append(f.load_maps())
        if len(maps) >= n:
            break
    if not maps:
        raise DataError(f"sequence {seq_dir} holds no frames")
    try:
        return calibrate_from_maps(maps, height, template)
    except ContractError as exc:
        raise DataError(f"calibration failed: {exc}") from exc


def _eval_joints(sk: Skeleton) -> np.ndarray | None:
    try:
        return sk.indices(EVAL_JOINTS)
    except (KeyError, ContractError):
        return None


def track(req: S.TrackRequest) -> S.TrackResponse:
    cfg = _config(req)
    config = _track_config(cfg, req)
    meta = read_meta(req.sequence)
    cam = _camera_for(meta, req.fov_deg)
    skeleton = _calibrated(req.sequence, _template(meta, req.skeleton_path), cfg, meta)
    out = Path(req.out) if req.out else Path(req.sequence) / "track"
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from exc

    results: list[FrameResult] = []
    try:
        for r in track_sequence(track_inputs(req.sequence, meta.crop_size), skeleton, cam, config):
            results.append(r)
    except ContractError as exc:
        raise DataError(f"sequence {req.sequence} is inconsistent: {exc}") from exc
    write_jsonl(out / POSES, (pose_record(r) for r in results))
    write_jsonl(out / DIAGNOSTICS, (r.diagnostics() for r in results))

    flagged = count_solver_flagged(results)
    frac = flagged / len(results)
    terminations: dict[str, int] = {}
    for r in results:
        terminations[r.reason] = terminations.get(r.reason, 0) + 1
    warmup = int(cfg["track"]["warmup_frames"])
    pred = np.stack([r.positions for r in results])
    gt = load_positions(req.sequence)
    report_eval = None
    if gt.shape == pred.shape and len(results) - warmup >= 1:
        report_eval = evaluate(pred[warmup:], gt[warmup:], meta.skeleton.joint_names, _eval_joints(meta.skeleton))
    report = {
        "frames": len(results),
        "warmup_frames": warmup,
        "flagged_frames": flagged,
        "flagged_fraction": frac,
        "max_flagged_fraction": float(cfg["track"]["max_flagged_fraction"]),
        "terminations": terminations,
        "eval": None if report_eval is None else report_eval.to_dict(),
        "calibrated_skeleton": skeleton.to_dict(),
        "camera": cam.to_dict(),
        "config": cfg,
        "flags": {"no_ik": req.no_ik, "no_filter": req.no_filter, "gt_2d_lookup": req.gt_2d_lookup},
    }
    _write_json(out / REPORT, report)
    return S.TrackResponse(
        out=str(out), frames=len(results), flagged_frames=flagged, flagged_fraction=frac,
        max_flagged_fraction=report["max_flagged_fraction"],
        mpjpe_mm=None if report_eval is None else report_eval.mpjpe_mm,
        pck150=None if report_eval is None else report_eval.pck["150"],
        jitter_mm_per_frame2=None if report_eval is None else report_eval.jitter_mm_per_frame2,
        terminations=terminations,
    )


# -- eval --------------------------------------------------------------------

def _names_for(req: S.EvalRequest, joint_count: int) -> list[str]:
    if req.skeleton_path:
        sk = load_skeleton(req.skeleton_path)
    elif Path(req.gt).is_dir() and (Path(req.gt) / "meta.json").exists():
        sk = read_meta(req.gt).skeleton
    else:
        sk = default_skeleton()
    if sk.joint_count != joint_count:
        if req.joints == "all" and req.skeleton_path is None:
            return [f"joint_{j}" for j in range(joint_count)]
        raise DataError(f"files hold {joint_count} joints, skeleton has {sk.joint_count}")
    return list(sk.joint_names)


def evaluate_files(req: S.EvalRequest) -> S.EvalResponse:
    pred = load_positions(req.pred)
    gt = load_positions(req.gt)
    if pred.shape != gt.shape:
        raise DataError(f"prediction {pred.shape} and ground truth {gt.shape} do not align")
    if req.warmup_frames >= pred.shape[0]:
        raise DataError(f"warm-up of {req.warmup_frames} frames leaves nothing to evaluate")
    names = _names_for(req, pred.shape[1])
    joints = None
    if req.joints == "eval14":
        missing = [n for n in EVAL_JOINTS if n not in names]
        if missing:
            raise DataError(f"evaluation joints missing from skeleton: {missing}")
        joints = [names.index(n) for n in EVAL_JOINTS]
    w = slice(req.warmup_frames, None)
    report = evaluate(pred[w], gt[w], names, joints)
    if req.out:
        _write_json(Path(req.out), report.to_dict())
    if req.csv:
        try:
            Path(req.csv).write_text(errors_csv(pred[w], gt[w], names, joints))
        except OSError as exc:
            raise DataError(f"cannot write {req.csv}: {exc}") from exc
    return S.EvalResponse(**report.to_dict())


# -- bench -------------------------------------------------------------------

def _bench_inputs(req: S.BenchRequest, cfg: dict):
    """Materialize (maps, crop, ts, gt_kp) tuples, the skeleton and camera in memory."""
    if req.sequence:
        meta = read_meta(req.sequence)
        cam = _camera_for(meta, req.fov_deg)
        skeleton = _calibrated(req.sequence, meta.skeleton, cfg, meta)
        items = list(track_inputs(req.sequence, meta.crop_size))[: max(req.frames, 0) or None]
        return items, skeleton, cam
    if req.fov_deg is not None:
        cfg["camera"]["fov_deg"] = req.fov_deg
    sk = default_skeleton()
    cam = cfgmod.camera_model(cfg)
    g = cfg["generate"]
    fps = float(g["fps"])
    motion = sinusoid_motion(sk, req.frames, fps, req.seed, float(g["max_amplitude"]),
                             default_root_path(req.frames, fps, float(g["depth_mm"]), float(g["radius_mm"])),
                             float(g["max_frequency"]))
    noise = replace(cfgmod.noise_spec(cfg), seed=req.seed)
    observed = list(simulate(generate_frames(motion, sk, cam), sk, cam, noise, cfgmod.box_params(cfg)))
    n = int(cfg["calibration"]["frames"])
    skeleton = calibrate_from_maps([o.obs.maps for o in observed[:n]], sk.height(), sk)
    items = [(o.obs.maps, o.obs.crop, o.gt.timestamp, o.obs.gt_keypoints) for o in observed]
    return items, skeleton, cam


def _timing(samples) -> S.StageTiming:
    ms = np.asarray(samples, dtype=float) * 1e3
    return S.StageTiming(p50_ms=float(np.percentile(ms, 50)), p95_ms=float(np.percentile(ms, 95)),
                         mean_ms=float(ms.mean()), samples=int(ms.size))


def bench(req: S.BenchRequest) -> S.BenchResponse:
    cfg = _config(req)
    base = cfgmod.track_config(cfg)
    items, skeleton, cam = _bench_inputs(req, cfg)
    if len(items) < 3:
        raise DataError("benchmark needs at least 3 frames")
    runs = []
    for jac in req.jacobians:
        results = list(track_sequence(iter(items), skeleton, cam, replace(base, jacobian=jac)))
        stages = {s: _timing([r.timings[s] for r in results]) for s in TIMED_STAGES}
        stages["filter"] = _timing([r.timings["filter_2d"] + r.timings["filter_3d_local"]
                                    + r.timings["filter_3d_global"] for r in results])
        stages["total"] = _timing([sum(r.timings.values()) for r in results])
        runs.append(S.BenchRun(jacobian=jac, frames=len(results),
                               mean_iterations=float(np.mean([r.iterations for r in results])), stages=stages))
    response = S.BenchResponse(joints=skeleton.joint_count, runs=runs)
    if req.out:
        _write_json(Path(req.out), response.model_dump())
    return response


# -- streaming sessions --------------------------------------------------------

class SessionStore:
    """Live trackers keyed by id; each session serializes its own frames."""

    def __init__(self):
        self._lock = threading.Lock()
        self._sessions: dict[str, tuple[threading.Lock, Tracker, list]] = {}

    def open(self, req: S.SessionRequest) -> S.SessionResponse:
        cfg = _config(req)
        config = _track_config(cfg, req)
        try:
            sk = default_skeleton() if req.skeleton is None else Skeleton.from_dict(req.skeleton)
            if req.camera is not None:
                cam = CameraModel.from_dict(req.camera)
            else:
                if req.fov_deg is not None:
                    cfg["camera"]["fov_deg"] = req.fov_deg
                cam = cfgmod.camera_model(cfg)
        except ContractError as exc:
            raise ConfigError(str(exc)) from exc
        sid = uuid.uuid4().hex
        with self._lock:
            self._sessions[sid] = (threading.Lock(), Tracker(sk, cam, config), [cfgmod.box_params(cfg)])
        return S.SessionResponse(session_id=sid, joints=sk.joint_count)

    def _get(self, sid: str):
        with self._lock:
            if sid not in self._sessions:
                raise DataError(f"unknown session {sid}")
            return self._sessions[sid]

    def step(self, sid: str, req: S.FrameRequest) -> S.FrameResponse:
        lock, tracker, (box,) = self._get(sid)
        try:
            blob = base64.b64decode(req.maps_b64, validate=True)
        except (binascii.Error, ValueError) as exc:
            raise DataError(f"maps_b64 is not base64: {exc}") from exc
        maps = from_bytes(blob)
        try:
            bb = BoundingBox.from_corners(req.crop_box)
        except ContractError as exc:
            raise DataError(str(exc)) from exc
        crop = crop_transform(bb, box.crop)
        with lock:
            r = tracker.step(maps, crop, req.timestamp)
        nxt, _ = propose(bb, r.keypoints, tracker.camera.image_size, box.momentum, box.buffer_w, box.buffer_h)
        return S.FrameResponse(
            frame=r.index, timestamp=r.timestamp, theta=r.pose.theta.tolist(), d=r.pose.d.tolist(),
            positions=r.positions.tolist(), keypoints=r.keypoints.uv.tolist(),
            keypoints_visible=np.asarray(r.keypoints.visible, dtype=bool).tolist(),
            next_box=nxt.to_list(), diagnostics=r.diagnostics(),
        )

    def close(self, sid: str) -> None:
        with self._lock:
            if self._sessions.pop(sid, None) is None:
                raise DataError(f"unknown session {sid}")
