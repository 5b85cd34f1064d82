"""Run configuration: YAML/JSON files with dotted-key overrides.

Recognised keys (all optional)::

    fit.w_ik, fit.w_proj, fit.w_smooth, fit.w_depth, fit.max_iters, fit.jacobian,
    fit.init_depth_mm
    filter.<keypoints|local3d|global3d>.fcmin / .beta / .dcutoff / .enabled
    bb.momentum, bb.buffer_w, bb.buffer_h, bb.crop
    camera.fov_deg, camera.width, camera.height, camera.intrinsics
    calibration.frames, calibration.user_height_mm
    track.gt_2d_lookup, track.max_flagged_fraction, track.warmup_frames
    generate.frames, generate.fps, generate.max_amplitude, generate.max_frequency,
    generate.depth_mm, generate.radius_mm, generate.periodic
    noise.<any NoiseSpec field>
"""
from __future__ import annotations

import copy
from dataclasses import replace
from pathlib import Path
from typing import Any

import yaml

from .bbox import BoxParams
from .camera import CameraModel, from_vertical_fov, load_intrinsics
from .errors import ConfigError, ContractError
from .filters import OneEuroParams
from .fitting import EnergyWeights
from .oracle import NoiseSpec
from .pipeline import TrackConfig

DEFAULTS: dict[str, Any] = {
    "fit": {"w_ik": 1.0, "w_proj": 44.0, "w_smooth": 0.07, "w_depth": 0.11, "max_iters": 50,
            "jacobian": "analytic", "init_depth_mm": None},
    "filter": {
        "keypoints": {"fcmin": 1.7, "beta": 0.3, "dcutoff": 1.0, "enabled": True},
        "local3d": {"fcmin": 0.8, "beta": 0.4, "dcutoff": 1.0, "enabled": True},
        "global3d": {"fcmin": 20.0, "beta": 0.4, "dcutoff": 1.0, "enabled": True},
    },
    "bb": {"momentum": 0.75, "buffer_w": 0.4, "buffer_h": 0.2, "crop": 368},
    "camera": {"fov_deg": 54.0, "width": 1280, "height": 720, "intrinsics": None},
    "calibration": {"frames": 10, "user_height_mm": None},
    "track": {"gt_2d_lookup": False, "max_flagged_fraction": 0.2, "warmup_frames": 10},
    "generate": {"frames": 300, "fps": 30.0, "max_amplitude": 0.3, "max_frequency": 0.3,
                 "depth_mm": 4000.0, "radius_mm": 300.0, "periodic": False},
    "noise": NoiseSpec().to_dict(),
}


def load_file(path: str | Path | None) -> dict:
    if path is None:
        return {}
    try:
        data = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML/JSON: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a mapping")
    return data


def merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def set_dotted(tree: dict, key: str, value) -> dict:
    parts = key.split(".")
    node = tree
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"config key {key!r} crosses a scalar")
    node[parts[-1]] = value
    return tree


def parse_override(text: str) -> tuple[str, Any]:
    """``a.b=value`` with the value parsed as YAML (numbers, booleans, null)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key=value")
    key, raw = text.split("=", 1)
    try:
        return key.strip(), yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"bad override value in {text!r}") from exc


def resolve(path=None, overrides: list[str] | None = None, extra: dict | None = None) -> dict:
    """Defaults, then the file, then ``extra`` (from flags), then ``key=value`` overrides."""
    # deep copy: callers edit the result in place and must not touch DEFAULTS
    cfg = merge(copy.deepcopy(DEFAULTS), load_file(path))
    if extra:
        cfg = merge(cfg, extra)
    for item in overrides or []:
        key, value = parse_override(item)
        set_dotted(cfg, key, value)
    return cfg


def track_config(cfg: dict) -> TrackConfig:
    try:
        fit = cfg["fit"]
        filt = cfg["filter"]
        params = {
            stage: OneEuroParams(float(filt[stage]["fcmin"]), float(filt[stage]["beta"]),
                                 float(filt[stage].get("dcutoff", 1.0)))
            for stage in ("keypoints", "local3d", "global3d")
        }
        weights = EnergyWeights(float(fit["w_ik"]), float(fit["w_proj"]), float(fit["w_smooth"]), float(fit["w_depth"]))
        if fit["jacobian"] not in ("analytic", "numeric"):
            raise ConfigError(f"fit.jacobian must be analytic or numeric, got {fit['jacobian']!r}")
        return TrackConfig(
            weights=weights,
            filter_keypoints=bool(filt["keypoints"].get("enabled", True)),
            filter_local3d=bool(filt["local3d"].get("enabled", True)),
            filter_global3d=bool(filt["global3d"].get("enabled", True)),
            keypoint_params=params["keypoints"],
            local3d_params=params["local3d"],
            global3d_params=params["global3d"],
            gt_2d_lookup=bool(cfg["track"]["gt_2d_lookup"]),
            jacobian=fit["jacobian"],
            max_iters=int(fit["max_iters"]),
            init_depth_mm=None if fit.get("init_depth_mm") is None else float(fit["init_depth_mm"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc!r}") from exc


def apply_flags(config: TrackConfig, no_ik: bool = False, no_filter: bool = False,
                gt_2d_lookup: bool = False) -> TrackConfig:
    if no_ik:
        config = config.without_ik()
    if no_filter:
        config = config.without_filters()
    if gt_2d_lookup:
        config = replace(config, gt_2d_lookup=True)
    return config


def box_params(cfg: dict) -> BoxParams:
    try:
        bb = cfg["bb"]
        return BoxParams(float(bb["momentum"]), float(bb["buffer_w"]), float(bb["buffer_h"]), float(bb["crop"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid bb configuration: {exc}") from exc


def noise_spec(cfg: dict) -> NoiseSpec:
    try:
        return NoiseSpec.from_dict(dict(cfg["noise"]))
    except (ContractError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid noise configuration: {exc}") from exc


def camera_model(cfg: dict) -> CameraModel:
    cam = cfg["camera"]
    try:
        if cam.get("intrinsics"):
            return load_intrinsics(cam["intrinsics"])
        return from_vertical_fov(float(cam["fov_deg"]), (int(cam["width"]), int(cam["height"])))
    except ContractError as exc:
        raise ConfigError(f"invalid camera configuration: {exc}") from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid camera configuration: {exc!r}") from exc
