"""Pose and shape evaluation: absolute and relative errors, confidence AP,
two-sided point-cloud distance, voxel IoU and centroid scale alignment."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Iterable, Optional

import numpy as np

from .geometry import PointCloud, RigidPose, relative_pose, rotation_angle_matrix
from .kernels import nn_argmin

BASELINE_EPS = 1e-6
ROTATION_THRESHOLD = np.pi / 6


class UndefinedScale(ValueError):
    """The predicted cloud's centroid is at the origin, so no scale aligns it."""


@dataclass(frozen=True)
class PoseEvalRecord:
    gt: RigidPose
    pred: RigidPose
    confidence: float = 1.0
    sequence_id: int = 0
    frame: int = 0

    def __post_init__(self):
        if not np.isfinite(self.confidence):
            raise ValueError("confidence must be finite")


@dataclass(frozen=True)
class ShapeEvalConfig:
    resolution: int = 30
    tau: Optional[float] = None
    smooth: bool = False

    def __post_init__(self):
        if self.resolution < 2:
            raise ValueError("voxel resolution must be >= 2")


# -- poses ---------------------------------------------------------------------


def rotation_error(r_gt: np.ndarray, r_pred: np.ndarray) -> float:
    """``2^-1/2 |ln R* R^T|_F``, i.e. the angle of ``R* R^T``."""
    return rotation_angle_matrix(np.asarray(r_gt) @ np.asarray(r_pred).T)


def absolute_errors(rec: PoseEvalRecord):
    """``(e_R, e_C)``: rotation angle and camera-centre distance."""
    e_r = rotation_error(rec.gt.rotation.matrix(), rec.pred.rotation.matrix())
    e_c = float(np.linalg.norm(rec.pred.camera_center() - rec.gt.camera_center()))
    return e_r, e_c


def relative_errors(rec_t: PoseEvalRecord, rec_tp: PoseEvalRecord):
    """``(e_R_rel, e_T_rel)`` of one frame pair, or ``None`` for a degenerate baseline."""
    gt = relative_pose(rec_t.gt, rec_tp.gt)
    pr = relative_pose(rec_t.pred, rec_tp.pred)
    n_gt, n_pr = np.linalg.norm(gt.translation), np.linalg.norm(pr.translation)
    if n_gt <= BASELINE_EPS or n_pr <= BASELINE_EPS:
        return None
    e_r = rotation_error(gt.rotation.matrix(), pr.rotation.matrix())
    e_t = float(np.linalg.norm(pr.translation / n_pr - gt.translation / n_gt))
    return e_r, e_t


def record_pairs(records: list, pairing: str = "sequence"):
    """Index pairs entering the relative metrics.

    ``"sequence"`` pairs frames of the same sequence only; ``"all"`` pairs every
    two records.
    """
    if pairing == "all":
        return list(combinations(range(len(records)), 2))
    if pairing != "sequence":
        raise ValueError(f"unknown pairing {pairing!r}")
    by_seq: dict = {}
    for i, r in enumerate(records):
        by_seq.setdefault(r.sequence_id, []).append(i)
    out = []
    for sid in sorted(by_seq):
        out.extend(combinations(by_seq[sid], 2))
    return out


def median_report(records: list, pairing: str = "sequence") -> dict:
    """Medians of absolute errors over records and relative errors over pairs."""
    if not records:
        raise ValueError("no records to evaluate")
    abs_err = np.array([absolute_errors(r) for r in records])
    rel = [relative_errors(records[i], records[j]) for i, j in record_pairs(records, pairing)]
    rel = np.array([x for x in rel if x is not None]).reshape(-1, 2)
    nan = float("nan")
    return {
        "e_R": float(np.median(abs_err[:, 0])),
        "e_C": float(np.median(abs_err[:, 1])),
        "e_R_rel": float(np.median(rel[:, 0])) if len(rel) else nan,
        "e_T_rel": float(np.median(rel[:, 1])) if len(rel) else nan,
        "n_pairs": int(len(rel)),
    }


def average_precision(errors: Iterable, confidences: Iterable, threshold: float) -> float:
    """Non-interpolated AP of ``error <= threshold`` ranked by decreasing confidence.

    Ties keep the original order. With no positive at all the AP is 0.
    """
    e = np.asarray(list(errors), dtype=np.float64)
    c = np.asarray(list(confidences), dtype=np.float64)
    if e.shape != c.shape or e.size == 0:
        raise ValueError("need equally many (>= 1) errors and confidences")
    labels = (e <= threshold)[np.argsort(-c, kind="stable")]
    if not labels.any():
        return 0.0
    precision = np.cumsum(labels) / np.arange(1, labels.size + 1)
    return float(precision[labels].mean())


# -- shapes --------------------------------------------------------------------


def _pts(c) -> np.ndarray:
    p = np.asarray(getattr(c, "points", c), dtype=np.float64).reshape(-1, 3)
    if len(p) == 0:
        raise ValueError("point cloud is empty")
    return p


def pcl_distance(c, c_hat) -> float:
    """Mean nearest-neighbour distance from ``C`` to ``C^`` plus the reverse."""
    a, b = _pts(c), _pts(c_hat)
    _, d_ab = nn_argmin(a, b)
    _, d_ba = nn_argmin(b, a)
    return float(d_ab.mean() + d_ba.mean())


def voxel_indices(points: np.ndarray, lo: np.ndarray, hi: np.ndarray, resolution: int) -> np.ndarray:
    """Flat voxel index of every point inside the box, ``-1`` for points outside."""
    size = (hi - lo) / resolution
    rel = (points - lo) / size
    inside = np.all((points >= lo) & (points <= hi), axis=1)
    ijk = np.clip(np.floor(rel).astype(np.int64), 0, resolution - 1)
    flat = (ijk[:, 0] * resolution + ijk[:, 1]) * resolution + ijk[:, 2]
    return np.where(inside, flat, -1)


def voxel_iou(c, c_hat, cfg: ShapeEvalConfig = ShapeEvalConfig()) -> float:
    """IoU of occupied voxels on a grid spanning ``C``'s bounding box.

    Points of ``C^`` outside the box occupy no voxel.
    """
    a, b = _pts(c), _pts(c_hat)
    lo, hi = a.min(axis=0), a.max(axis=0)
    if np.any(hi - lo <= 0):
        raise ValueError("ground-truth bounding box has zero volume")
    va = set(np.unique(voxel_indices(a, lo, hi, cfg.resolution)).tolist())
    vb = set(np.unique(voxel_indices(b, lo, hi, cfg.resolution)).tolist()) - {-1}
    return len(va & vb) / len(va | vb)


def scale_align(c_hat, c):
    """``zeta = mu_C . mu_C^ / |mu_C^|^2`` and the scaled prediction ``zeta C^``."""
    b, a = _pts(c_hat), _pts(c)
    mu_hat, mu = b.mean(axis=0), a.mean(axis=0)
    den = float(mu_hat @ mu_hat)
    if den <= 1e-300:
        raise UndefinedScale("predicted centroid is at the origin")
    zeta = float(mu @ mu_hat) / den
    conf = getattr(c_hat, "confidence", None)
    return zeta, PointCloud(zeta * b, conf)
