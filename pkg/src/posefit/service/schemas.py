"""Request and response bodies for the HTTP service and the CLI."""
from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field


class _Request(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ConfigInputs(_Request):
    """Where a command's configuration comes from, lowest precedence first."""

    config_path: Optional[str] = None
    overrides: list[str] = Field(default_factory=list, description="dotted key=value pairs")


class GenerateRequest(ConfigInputs):
    out: str
    seed: Optional[int] = None
    frames: Optional[int] = None
    fov_deg: Optional[float] = None
    skeleton_path: Optional[str] = None
    motion_path: Optional[str] = None
    noise_path: Optional[str] = None


class GenerateResponse(BaseModel):
    out: str
    frames: int
    joints: int
    subject_height_mm: float
    rng: str


class TrackRequest(ConfigInputs):
    sequence: str
    out: Optional[str] = None
    fov_deg: Optional[float] = None
    skeleton_path: Optional[str] = None
    gt_2d_lookup: bool = False
    no_ik: bool = False
    no_filter: bool = False


class TrackResponse(BaseModel):
    out: str
    frames: int
    flagged_frames: int
    flagged_fraction: float
    max_flagged_fraction: float
    mpjpe_mm: Optional[float] = None
    pck150: Optional[float] = None
    jitter_mm_per_frame2: Optional[float] = None
    terminations: dict[str, int]


class EvalRequest(_Request):
    pred: str
    gt: str
    out: Optional[str] = None
    csv: Optional[str] = None
    warmup_frames: int = Field(0, ge=0)
    joints: Literal["eval14", "all"] = "eval14"
    skeleton_path: Optional[str] = None


class EvalResponse(BaseModel):
    mpjpe_mm: float
    pck: dict[str, float]
    auc: float
    per_joint: dict[str, dict[str, float]]
    jitter_mm_per_frame2: Optional[float]
    thresholds_mm: list[float]
    frames: int
    joints: list[str]


class BenchRequest(ConfigInputs):
    sequence: Optional[str] = None
    out: Optional[str] = None
    frames: int = Field(300, ge=3)
    seed: int = 0
    fov_deg: Optional[float] = None
    jacobians: list[Literal["analytic", "numeric"]] = Field(default_factory=lambda: ["analytic", "numeric"])


class StageTiming(BaseModel):
    p50_ms: float
    p95_ms: float
    mean_ms: float
    samples: int


class BenchRun(BaseModel):
    jacobian: str
    frames: int
    mean_iterations: float
    stages: dict[str, StageTiming]


class BenchResponse(BaseModel):
    joints: int
    runs: list[BenchRun]


class SessionRequest(ConfigInputs):
    """Open a per-stream tracker; skeleton and camera default to the built-ins."""

    skeleton: Optional[dict] = None
    camera: Optional[dict] = None
    fov_deg: Optional[float] = None
    gt_2d_lookup: bool = False
    no_ik: bool = False
    no_filter: bool = False


class SessionResponse(BaseModel):
    session_id: str
    joints: int


class FrameRequest(_Request):
    maps_b64: str = Field(description="map stack in the VNMP binary format, base64")
    crop_box: list[float] = Field(min_length=4, max_length=4, description="x0, y0, x1, y1 in frame px")
    timestamp: Optional[float] = None


class FrameResponse(BaseModel):
    frame: int
    timestamp: float
    theta: list[list[float]]
    d: list[float]
    positions: list[list[float]]
    keypoints: list[list[float]]
    keypoints_visible: list[bool]
    next_box: list[float]
    diagnostics: dict


class ErrorBody(BaseModel):
    error: str
    message: str
    exit_code: int
