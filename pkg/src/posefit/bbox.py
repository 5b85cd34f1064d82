"""Keypoint-driven bounding-box tracking and the box-to-crop mapping."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .posemaps import CROP_SIZE, Keypoints2D

MOMENTUM = 0.75
BUFFER_W = 0.4
BUFFER_H = 0.2
MIN_SIDE_PX = 1.0


@dataclass(frozen=True)
class BoxParams:
    momentum: float = MOMENTUM
    buffer_w: float = BUFFER_W
    buffer_h: float = BUFFER_H
    crop: float = CROP_SIZE

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError("box momentum must lie in [0, 1)")
        if self.buffer_w < 0 or self.buffer_h < 0:
            raise ContractError("box buffers must be non-negative")
        if not self.crop > 0:
            raise ContractError("crop size must be positive")


class BootstrapRequired(Exception):
    """No previous box and no visible keypoints: the caller must seed a box."""


@dataclass(frozen=True)
class BoundingBox:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ContractError(f"degenerate bounding box {self}")

    @property
    def corners(self) -> np.ndarray:
        return np.array([self.x0, self.y0, self.x1, self.y1])

    @property
    def size(self) -> tuple[float, float]:
        return self.x1 - self.x0, self.y1 - self.y0

    @classmethod
    def from_corners(cls, c) -> "BoundingBox":
        return cls(*(float(v) for v in c))

    def to_list(self) -> list[float]:
        return [self.x0, self.y0, self.x1, self.y1]


def buffered_box(uv: np.ndarray, buffer_w: float = BUFFER_W, buffer_h: float = BUFFER_H) -> np.ndarray:
    """Tight box around points, enlarged and centred horizontally on their centroid."""
    lo = uv.min(axis=0)
    hi = uv.max(axis=0)
    w = (hi[0] - lo[0]) * (1.0 + buffer_w)
    h = (hi[1] - lo[1]) * (1.0 + buffer_h)
    w = max(w, MIN_SIDE_PX)
    h = max(h, MIN_SIDE_PX)
    cx = uv[:, 0].mean()
    cy = 0.5 * (lo[1] + hi[1])
    return np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])


def clamp_to_frame(corners: np.ndarray, frame_size) -> np.ndarray:
    W, H = frame_size
    c = np.clip(corners, 0.0, [W, H, W, H])
    # keep a valid box even when the person leaves the frame
    c[2] = max(c[2], min(c[0] + MIN_SIDE_PX, W))
    c[0] = min(c[0], c[2] - MIN_SIDE_PX)
    c[3] = max(c[3], min(c[1] + MIN_SIDE_PX, H))
    c[1] = min(c[1], c[3] - MIN_SIDE_PX)
    return c


def propose(prev_bb: BoundingBox | None, keypoints: Keypoints2D, frame_size, momentum: float = MOMENTUM,
            buffer_w: float = BUFFER_W, buffer_h: float = BUFFER_H) -> tuple[BoundingBox, bool]:
    """Box for the next frame from this frame's full-frame keypoints.

    Returns ``(box, stale)``; ``stale`` is set when no keypoint was visible
    and the previous box is carried over.
    """
    vis = np.asarray(keypoints.visible, dtype=bool)
    if not vis.any():
        if prev_bb is None:
            raise BootstrapRequired("no visible keypoints and no previous box")
        return prev_bb, True
    new = buffered_box(np.asarray(keypoints.uv)[vis], buffer_w, buffer_h)
    if prev_bb is not None:
        new = momentum * prev_bb.corners + (1.0 - momentum) * new
    return BoundingBox.from_corners(clamp_to_frame(new, frame_size)), False


@dataclass(frozen=True)
class CropTransform:
    """Axis-aligned affine map between full-frame pixels and the square crop."""

    box: BoundingBox
    crop_size: float = CROP_SIZE

    @property
    def scale(self) -> np.ndarray:
        w, h = self.box.size
        return np.array([self.crop_size / w, self.crop_size / h])

    @property
    def origin(self) -> np.ndarray:
        return np.array([self.box.x0, self.box.y0])

    def to_crop(self, uv) -> np.ndarray:
        return (np.asarray(uv, dtype=float) - self.origin) * self.scale

    def to_frame(self, uv) -> np.ndarray:
        return np.asarray(uv, dtype=float) / self.scale + self.origin

    def keypoints_to_frame(self, kps: Keypoints2D) -> Keypoints2D:
        return kps.with_uv(self.to_frame(kps.uv))


def crop_transform(bb: BoundingBox, crop_size: float = CROP_SIZE) -> CropTransform:
    if not crop_size > 0:
        raise ContractError("crop size must be positive")
    return CropTransform(bb, float(crop_size))
