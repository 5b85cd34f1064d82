"""Pose metrics: MPJPE, 3D PCK, AUC, per-joint breakdown and jitter.

All metrics root-align each frame (joint 0 is the root) and accumulate in a
fixed left-to-right order so results are reproducible bit for bit.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ContractError, DataError

PCK_THRESHOLD_MM = 150.0
AUC_THRESHOLDS = tuple(float(t) for t in range(0, 151, 5))


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[-1] != 3:
        raise ContractError(f"prediction {pred.shape} and ground truth {gt.shape} are not aligned")
    return pred, gt


def joint_errors(pred, gt, joints=None) -> np.ndarray:
    """Root-aligned Euclidean errors, shape (T, len(joints))."""
    pred, gt = _pair(pred, gt)
    d = (pred - pred[:, :1]) - (gt - gt[:, :1])
    if joints is not None:
        d = d[:, np.asarray(joints, dtype=int)]
    return np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2])


def _ordered_mean(values: np.ndarray) -> float:
    flat = np.ravel(values)
    if flat.size == 0:
        raise ContractError("no values to average")
    return float(np.cumsum(flat)[-1] / flat.size)


def mpjpe(pred, gt, joints=None) -> float:
    return _ordered_mean(joint_errors(pred, gt, joints))


def _hits(errors: np.ndarray, threshold: float) -> int:
    # strictly below the threshold; at 0 mm only exact hits count, so a
    # perfect prediction scores 1 over the whole grid
    if threshold > 0:
        return int(np.count_nonzero(errors < threshold))
    return int(np.count_nonzero(errors <= 0.0))


def pck(pred, gt, threshold_mm: float = PCK_THRESHOLD_MM, joints=None) -> float:
    err = joint_errors(pred, gt, joints)
    return _hits(err, threshold_mm) / err.size


def pck_curve(errors: np.ndarray, thresholds=AUC_THRESHOLDS) -> np.ndarray:
    errors = np.ravel(errors)
    return np.array([_hits(errors, t) / errors.size for t in thresholds])


def auc(pred, gt, joints=None, thresholds=AUC_THRESHOLDS) -> float:
    return _ordered_mean(pck_curve(joint_errors(pred, gt, joints), thresholds))


def jitter(sequence, joints=None) -> float:
    """Mean second-difference magnitude, mm/frame^2."""
    seq = np.asarray(sequence, dtype=float)
    if seq.ndim != 3 or seq.shape[0] < 3:
        raise ContractError("jitter needs a (T>=3, J, 3) sequence")
    if joints is not None:
        seq = seq[:, np.asarray(joints, dtype=int)]
    a = seq[2:] - 2.0 * seq[1:-1] + seq[:-2]
    return _ordered_mean(np.sqrt(a[..., 0] * a[..., 0] + a[..., 1] * a[..., 1] + a[..., 2] * a[..., 2]))


@dataclass
class EvalReport:
    mpjpe_mm: float
    pck: dict  # threshold (str, mm) -> fraction
    auc: float
    per_joint: dict  # joint name -> {"pck": .., "mpjpe_mm": ..}
    jitter_mm_per_frame2: float | None
    thresholds_mm: list
    frames: int
    joints: list

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        try:
            return cls(**data)
        except TypeError as exc:
            raise DataError(f"malformed evaluation report: {exc}") from exc


def evaluate(pred, gt, joint_names, joints=None, thresholds=AUC_THRESHOLDS) -> EvalReport:
    """Full report over ``joints`` (indices into ``joint_names``; default all)."""
    pred, gt = _pair(pred, gt)
    idx = np.arange(pred.shape[1]) if joints is None else np.asarray(joints, dtype=int)
    err = joint_errors(pred, gt, idx)
    curve = pck_curve(err, thresholds)
    per_joint = {}
    for col, j in enumerate(idx):
        e = err[:, col]
        per_joint[joint_names[j]] = {
            "pck": _hits(e, PCK_THRESHOLD_MM) / e.size,
            "mpjpe_mm": _ordered_mean(e),
        }
    pck_map = {f"{t:g}": float(v) for t, v in zip(thresholds, curve)}
    pck_map[f"{PCK_THRESHOLD_MM:g}"] = _hits(err, PCK_THRESHOLD_MM) / err.size
    return EvalReport(
        mpjpe_mm=_ordered_mean(err),
        pck=pck_map,
        auc=_ordered_mean(curve),
        per_joint=per_joint,
        jitter_mm_per_frame2=jitter(pred, idx) if pred.shape[0] >= 3 else None,
        thresholds_mm=list(thresholds),
        frames=int(pred.shape[0]),
        joints=[joint_names[j] for j in idx],
    )


def errors_csv(pred, gt, joint_names, joints=None) -> str:
    idx = np.arange(np.shape(pred)[1]) if joints is None else np.asarray(joints, dtype=int)
    err = joint_errors(pred, gt, idx)
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["frame", "joint", "error_mm"])
    for t in range(err.shape[0]):
        for col, j in enumerate(idx):
            w.writerow([t, joint_names[j], repr(float(err[t, col]))])
    return buf.getvalue()
