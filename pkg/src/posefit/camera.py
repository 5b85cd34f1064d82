"""Ideal pinhole camera: square pixels, no skew, no distortion."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BehindCameraError, ConfigError, ContractError

DEFAULT_FOV_DEG = 54.0


@dataclass(frozen=True)
class CameraModel:
    focal_px: float
    principal_point: tuple[float, float]
    image_size: tuple[int, int]  # width, height

    def __post_init__(self):
        if not self.focal_px > 0:
            raise ContractError("focal length must be positive")
        cx, cy = self.principal_point
        w, h = self.image_size
        if not (0 <= cx <= w and 0 <= cy <= h):
            raise ContractError("principal point outside the image")

    def to_dict(self) -> dict:
        return {
            "focal_px": self.focal_px,
            "principal_point": list(self.principal_point),
            "image_size": list(self.image_size),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CameraModel":
        try:
            return cls(
                float(data["focal_px"]),
                tuple(float(v) for v in data["principal_point"]),
                tuple(int(v) for v in data["image_size"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed intrinsics: {exc!r}") from exc


def from_vertical_fov(fov_deg: float, image_size) -> CameraModel:
    if not 0 < fov_deg < 180:
        raise ContractError(f"vertical field of view must be in (0, 180), got {fov_deg}")
    w, h = image_size
    focal = (h / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
    return CameraModel(focal, (w / 2.0, h / 2.0), (int(w), int(h)))


def load_intrinsics(path: str | Path) -> CameraModel:
    try:
        return CameraModel.from_dict(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read intrinsics {path}: {exc}") from exc


def project(cam: CameraModel, points) -> np.ndarray:
    """Project (..., 3) camera-space points to (..., 2) pixels."""
    p = np.asarray(points, dtype=float)
    z = p[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError("point at or behind the camera plane")
    uv = cam.focal_px * p[..., :2] / z[..., None]
    return uv + np.asarray(cam.principal_point)


def project_clamped(cam: CameraModel, points, eps_mm: float = 1.0):
    """Projection with depth clamped to ``eps_mm``; returns (uv, any_clamped).

    Used inside residual evaluation so the solver never sees an infinity.
    """
    p = np.asarray(points, dtype=float)
    z = p[..., 2]
    clamped = z < eps_mm
    zc = np.where(clamped, eps_mm, z)
    uv = cam.focal_px * p[..., :2] / zc[..., None] + np.asarray(cam.principal_point)
    return uv, bool(np.any(clamped))


def backproject(cam: CameraModel, uv, depth_mm) -> np.ndarray:
    uv = np.asarray(uv, dtype=float)
    depth = np.asarray(depth_mm, dtype=float)
    if np.any(depth <= 0):
        raise ContractError("depth must be positive")
    xy = (uv - np.asarray(cam.principal_point)) * depth[..., None] / cam.focal_px
    return np.concatenate([xy, depth[..., None]], axis=-1)
