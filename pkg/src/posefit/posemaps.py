"""Heatmaps and location-maps.

A ``MapStack`` holds, per joint, a confidence heatmap and three maps with the
joint's root-relative x, y, z (mm). The 2D keypoint is the heatmap argmax; the
3D position is read from the location-maps at that same cell.

Maps are indexed ``[joint, row, col]``; cell ``(row, col)`` covers crop pixels
``[col*stride, (col+1)*stride) x [row*stride, (row+1)*stride)`` and its centre
is at ``((col+0.5)*stride, (row+0.5)*stride)``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError
from .skeleton import LocalPose3D

CROP_SIZE = 368
STRIDE_PX = 8
GRID = (CROP_SIZE // STRIDE_PX, CROP_SIZE // STRIDE_PX)  # (W, H) = 46 x 46
SIGMA_CELLS = 1.75

MAGIC = b"VNMP"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHHHHI")


@dataclass(frozen=True)
class MapStack:
    heatmaps: np.ndarray  # (J, H, W)
    locmaps: np.ndarray  # (J, 3, H, W), planes X, Y, Z
    stride_px: float = STRIDE_PX

    def __post_init__(self):
        h = np.asarray(self.heatmaps)
        loc = np.asarray(self.locmaps)
        if h.ndim != 3 or loc.shape != (h.shape[0], 3) + h.shape[1:]:
            raise ContractError(f"heatmap {h.shape} and location-map {loc.shape} shapes disagree")
        if not (np.all(np.isfinite(h)) and np.all(np.isfinite(loc))):
            raise ContractError("map stack contains non-finite values")
        if not self.stride_px > 0:
            raise ContractError("stride must be positive")

    @property
    def joint_count(self) -> int:
        return self.heatmaps.shape[0]

    @property
    def grid(self) -> tuple[int, int]:
        """(W, H) in cells."""
        return self.heatmaps.shape[2], self.heatmaps.shape[1]

    @property
    def crop_extent(self) -> tuple[float, float]:
        w, h = self.grid
        return w * self.stride_px, h * self.stride_px


@dataclass(frozen=True)
class Keypoints2D:
    uv: np.ndarray  # (J, 2) px
    confidence: np.ndarray  # (J,)
    visible: np.ndarray  # (J,) bool

    @classmethod
    def from_uv(cls, uv, visible=None) -> "Keypoints2D":
        uv = np.asarray(uv, dtype=float)
        J = uv.shape[0]
        vis = np.ones(J, dtype=bool) if visible is None else np.asarray(visible, dtype=bool)
        return cls(uv, vis.astype(float), vis)

    def with_uv(self, uv) -> "Keypoints2D":
        return Keypoints2D(np.asarray(uv, dtype=float), self.confidence, self.visible)


def cells_of(uv, stride_px: float) -> np.ndarray:
    """Integer (col, row) of the cell containing each pixel location."""
    return np.floor(np.asarray(uv, dtype=float) / stride_px).astype(int)


def cell_centers(cells, stride_px: float) -> np.ndarray:
    return (np.asarray(cells, dtype=float) + 0.5) * stride_px


def inside_crop(uv, grid, stride_px) -> np.ndarray:
    uv = np.asarray(uv, dtype=float)
    W, H = grid
    return (uv[:, 0] >= 0) & (uv[:, 0] < W * stride_px) & (uv[:, 1] >= 0) & (uv[:, 1] < H * stride_px)


def gaussian_heatmap(cell, grid, sigma_cells: float) -> np.ndarray:
    """Unnormalised Gaussian centred on ``cell``; value 1 at that cell."""
    W, H = grid
    cols = np.arange(W) - cell[0]
    rows = np.arange(H) - cell[1]
    return np.exp(-(rows[:, None] ** 2 + cols[None, :] ** 2) / (2.0 * sigma_cells ** 2))


def render_gt(keypoints, local_pose: LocalPose3D, grid=GRID, stride_px: float = STRIDE_PX,
              sigma_cells: float = SIGMA_CELLS) -> MapStack:
    """Ground-truth maps: a Gaussian per joint at its cell, constant location-maps.

    Joints whose keypoint falls outside the crop get an all-zero heatmap.
    """
    uv = keypoints.uv if isinstance(keypoints, Keypoints2D) else np.asarray(keypoints, dtype=float)
    pos = local_pose.positions
    J = uv.shape[0]
    if pos.shape[0] != J:
        raise ContractError("keypoints and local pose disagree on joint count")
    W, H = grid
    inside = inside_crop(uv, grid, stride_px)
    if isinstance(keypoints, Keypoints2D):
        inside &= keypoints.visible
    cells = cells_of(np.where(inside[:, None], uv, 0.0), stride_px)
    heat = np.zeros((J, H, W))
    for j in np.flatnonzero(inside):
        heat[j] = gaussian_heatmap(cells[j], grid, sigma_cells)
    loc = np.broadcast_to(pos[:, :, None, None], (J, 3, H, W)).copy()
    return MapStack(heat, loc, float(stride_px))


def parent_relative_gt(local_pose: LocalPose3D, parent, grid=GRID) -> np.ndarray:
    """Constant parent-relative maps (J, 3, H, W); the root's are zero."""
    pos = local_pose.positions
    par = np.array(parent)
    par[0] = 0
    delta = pos - pos[par]
    W, H = grid
    return np.broadcast_to(delta[:, :, None, None], (pos.shape[0], 3, H, W)).copy()


def decode(maps: MapStack) -> tuple[Keypoints2D, LocalPose3D]:
    """Argmax keypoints and location-map read-off.

    Ties resolve to the lowest row-major index. A joint whose heatmap has no
    positive value is reported invisible with zero 3D position.
    """
    J = maps.joint_count
    W, H = maps.grid
    flat = maps.heatmaps.reshape(J, -1)
    idx = np.argmax(flat, axis=1)
    conf = flat[np.arange(J), idx]
    visible = conf > 0
    rows, cols = np.divmod(idx, W)
    cells = np.stack([cols, rows], axis=1)
    uv = cell_centers(cells, maps.stride_px)
    xyz = maps.locmaps[np.arange(J), :, rows, cols]
    xyz = np.where(visible[:, None], xyz, 0.0)
    return Keypoints2D(uv, conf, visible), LocalPose3D(xyz)


def lookup_cells(maps: MapStack, uv) -> tuple[np.ndarray, np.ndarray]:
    """Cells holding each location, clamped to the grid; also the clamp flags."""
    W, H = maps.grid
    cells = cells_of(uv, maps.stride_px)
    clamped = np.clip(cells, 0, [W - 1, H - 1])
    return clamped, np.any(clamped != cells, axis=1)


def decode_at(maps: MapStack, given_keypoints) -> LocalPose3D:
    """Read the location-maps at supplied 2D locations instead of the argmax."""
    uv = given_keypoints.uv if isinstance(given_keypoints, Keypoints2D) else np.asarray(given_keypoints, float)
    if uv.shape != (maps.joint_count, 2):
        raise ContractError(f"expected {maps.joint_count} keypoints, got {uv.shape}")
    cells, _ = lookup_cells(maps, uv)
    J = maps.joint_count
    return LocalPose3D(maps.locmaps[np.arange(J), :, cells[:, 1], cells[:, 0]])


def locmap_loss(x_pred, x_gt, h_gt) -> tuple[float, np.ndarray]:
    """Heatmap-weighted L2 location-map loss and its gradient w.r.t. ``x_pred``."""
    x_pred = np.asarray(x_pred, dtype=float)
    x_gt = np.asarray(x_gt, dtype=float)
    h_gt = np.asarray(h_gt, dtype=float)
    if not (x_pred.shape == x_gt.shape == h_gt.shape):
        raise ContractError(f"shape mismatch {x_pred.shape} {x_gt.shape} {h_gt.shape}")
    weighted = h_gt * (x_pred - x_gt)
    peak = float(np.max(np.abs(weighted), initial=0.0))
    if peak == 0.0:
        return 0.0, np.zeros_like(x_pred)
    # scale before squaring so tiny weighted differences cannot underflow to zero
    unit = weighted / peak
    norm = float(np.sqrt(np.sum(unit * unit)))
    return peak * norm, h_gt * unit / norm


def bone_length_maps(dx, dy, dz) -> np.ndarray:
    dx, dy, dz = (np.asarray(a, dtype=float) for a in (dx, dy, dz))
    if not (dx.shape == dy.shape == dz.shape):
        raise ContractError("delta maps must share a shape")
    return np.sqrt(dx * dx + dy * dy + dz * dz)


# -- binary tensor format --------------------------------------------------

def to_bytes(maps: MapStack) -> bytes:
    J = maps.joint_count
    W, H = maps.grid
    if max(J, W, H) > 0xFFFF:
        raise ContractError("map stack too large for the tensor format")
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, J, W, H, int(round(maps.stride_px * 1000)))
    planes = np.concatenate([maps.heatmaps[:, None], maps.locmaps], axis=1)  # (J, 4, H, W)
    return header + planes.astype("<f4").tobytes(order="C")


def from_bytes(blob: bytes) -> MapStack:
    if len(blob) < _HEADER.size:
        raise DataError("map tensor truncated before header end")
    magic, version, J, W, H, stride_milli = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise DataError(f"bad map tensor magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported map tensor version {version}")
    expected = _HEADER.size + J * 4 * H * W * 4
    if len(blob) != expected:
        raise DataError(f"map tensor has {len(blob)} bytes, expected {expected}")
    planes = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(J, 4, H, W)
    planes = planes.astype(np.float64)
    return MapStack(planes[:, 0], planes[:, 1:], stride_milli / 1000.0)


def write_maps(path: str | Path, maps: MapStack) -> None:
    Path(path).write_bytes(to_bytes(maps))


def read_maps(path: str | Path) -> MapStack:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read map tensor {path}: {exc}") from exc
    return from_bytes(blob)
