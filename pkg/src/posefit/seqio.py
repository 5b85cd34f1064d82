"""On-disk sequence layout shared by ``generate``, ``track`` and ``eval``.

A sequence directory holds::

    meta.json        skeleton, camera, motion, noise, RNG description
    frames.jsonl     one line per frame: GT pose/joints/keypoints, crop boxes
    maps/NNNNNN.vnmp map stack per frame (see ``posemaps.to_bytes``)

Tracking writes ``poses.jsonl`` and ``diagnostics.jsonl`` next to its report.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .bbox import BoundingBox, crop_transform
from .camera import CameraModel
from .errors import ConfigError, DataError
from .oracle import RNG_ALGORITHM, GroundTruthFrame, MotionSpec, NoiseSpec
from .pipeline import ObservedFrame
from .posemaps import Keypoints2D, MapStack, read_maps, write_maps
from .skeleton import Pose, Skeleton

FORMAT = "posefit-sequence"
FORMAT_VERSION = 1
META = "meta.json"
FRAMES = "frames.jsonl"
MAPS_DIR = "maps"
POSES = "poses.jsonl"
DIAGNOSTICS = "diagnostics.jsonl"


def _dump(obj) -> str:
    # repr-exact floats keep reruns byte-identical
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _floats(a) -> list:
    return np.asarray(a, dtype=float).tolist()


@dataclass(frozen=True)
class SequenceMeta:
    skeleton: Skeleton
    camera: CameraModel
    motion: MotionSpec
    noise: NoiseSpec
    frame_count: int
    subject_height_mm: float
    crop_size: float

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "version": FORMAT_VERSION,
            "skeleton": self.skeleton.to_dict(),
            "camera": self.camera.to_dict(),
            "motion": self.motion.to_dict(),
            "noise": self.noise.to_dict(),
            "rng": RNG_ALGORITHM,
            "frames": self.frame_count,
            "subject_height_mm": self.subject_height_mm,
            "crop_size": self.crop_size,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SequenceMeta":
        if data.get("format") != FORMAT or data.get("version") != FORMAT_VERSION:
            raise DataError(f"not a {FORMAT} v{FORMAT_VERSION} directory")
        try:
            sk = Skeleton.from_dict(data["skeleton"])
            return cls(sk, CameraModel.from_dict(data["camera"]), MotionSpec.from_dict(data["motion"], sk),
                       NoiseSpec.from_dict(data["noise"]), int(data["frames"]),
                       float(data["subject_height_mm"]), float(data["crop_size"]))
        except (KeyError, TypeError, ValueError, ConfigError) as exc:
            raise DataError(f"malformed sequence metadata: {exc}") from exc


def map_name(index: int) -> str:
    return f"{MAPS_DIR}/{index:06d}.vnmp"


def frame_record(item: ObservedFrame) -> dict:
    gt, ob = item.gt, item.obs
    return {
        "index": gt.index,
        "timestamp": gt.timestamp,
        "pose": gt.pose.to_dict(),
        "positions": _floats(gt.positions),
        "keypoints": _floats(gt.keypoints),
        "crop_box": ob.crop.box.to_list(),
        "proposed_box": item.proposed_box.to_list(),
        "gt_keypoints_crop": _floats(ob.gt_keypoints.uv),
        "gt_visible_crop": np.asarray(ob.gt_keypoints.visible, dtype=bool).tolist(),
        "maps": map_name(gt.index),
    }


def write_sequence(out_dir: str | Path, meta: SequenceMeta, frames) -> int:
    """Stream ``ObservedFrame``s to disk; returns the number written."""
    out = Path(out_dir)
    try:
        (out / MAPS_DIR).mkdir(parents=True, exist_ok=True)
        (out / META).write_text(json.dumps(meta.to_dict(), indent=2, sort_keys=True) + "\n")
        n = 0
        with open(out / FRAMES, "w") as fh:
            for item in frames:
                write_maps(out / map_name(item.gt.index), item.obs.maps)
                fh.write(_dump(frame_record(item)) + "\n")
                n += 1
    except OSError as exc:
        raise DataError(f"cannot write sequence to {out}: {exc}") from exc
    return n


@dataclass(frozen=True)
class StoredFrame:
    gt: GroundTruthFrame
    crop_box: BoundingBox
    proposed_box: BoundingBox
    gt_keypoints_crop: Keypoints2D
    maps_path: Path

    def load_maps(self) -> MapStack:
        return read_maps(self.maps_path)


def read_meta(seq_dir: str | Path) -> SequenceMeta:
    path = Path(seq_dir) / META
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise DataError(f"no sequence at {seq_dir} (missing {META})") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"unreadable {path}: {exc}") from exc
    return SequenceMeta.from_dict(data)


def read_jsonl(path: str | Path) -> Iterator[dict]:
    try:
        with open(path) as fh:
            for n, line in enumerate(fh, 1):
                if line.strip():
                    try:
                        yield json.loads(line)
                    except json.JSONDecodeError as exc:
                        raise DataError(f"{path}:{n}: bad JSON line: {exc}") from exc
    except FileNotFoundError as exc:
        raise DataError(f"missing file {path}") from exc


def read_frames(seq_dir: str | Path) -> Iterator[StoredFrame]:
    root = Path(seq_dir)
    for rec in read_jsonl(root / FRAMES):
        try:
            gt = GroundTruthFrame(int(rec["index"]), float(rec["timestamp"]), Pose.from_dict(rec["pose"]),
                                  np.asarray(rec["positions"], dtype=float), np.asarray(rec["keypoints"], dtype=float))
            kp = Keypoints2D.from_uv(np.asarray(rec["gt_keypoints_crop"], dtype=float), rec["gt_visible_crop"])
            yield StoredFrame(gt, BoundingBox.from_corners(rec["crop_box"]),
                              BoundingBox.from_corners(rec["proposed_box"]), kp, root / rec["maps"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed frame record in {root / FRAMES}: {exc!r}") from exc


def track_inputs(seq_dir: str | Path, crop_size: float) -> Iterator[tuple]:
    """``(maps, crop, timestamp, gt_keypoints_crop)`` tuples for ``track_sequence``."""
    for f in read_frames(seq_dir):
        yield f.load_maps(), crop_transform(f.crop_box, crop_size), f.gt.timestamp, f.gt_keypoints_crop


def pose_record(result) -> dict:
    return {
        "frame": result.index,
        "timestamp": result.timestamp,
        "pose": result.pose.to_dict(),
        "positions": _floats(result.positions),
        "fitted_positions": _floats(result.fitted_positions),
        "keypoints": _floats(result.keypoints.uv),
        "keypoints_visible": np.asarray(result.keypoints.visible, dtype=bool).tolist(),
    }


def write_jsonl(path: str | Path, records) -> None:
    try:
        with open(path, "w") as fh:
            for rec in records:
                fh.write(_dump(rec) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def load_positions(path: str | Path, key: str = "positions") -> np.ndarray:
    """(T, J, 3) joint positions from ``poses.jsonl``/``frames.jsonl``, a
    sequence directory (ground truth) or a track output directory (predictions).
    """
    p = Path(path)
    if p.is_dir():
        if (p / POSES).exists():
            p = p / POSES
        elif (p / FRAMES).exists():
            p = p / FRAMES
        else:
            raise DataError(f"{path} holds neither {POSES} nor {FRAMES}")
    rows = []
    for rec in read_jsonl(p):
        if key not in rec:
            raise DataError(f"{p}: record without {key!r}")
        rows.append(rec[key])
    if not rows:
        raise DataError(f"{p} holds no frames")
    try:
        arr = np.asarray(rows, dtype=float)
    except ValueError as exc:
        raise DataError(f"{p}: ragged joint arrays") from exc
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DataError(f"{p}: expected (frames, joints, 3) positions, got {arr.shape}")
    return arr
