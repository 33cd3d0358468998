"""Laplace depth likelihood and globally aligned partial clouds."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Calibration, DepthMap, PointCloud, RigidPose, backproject
from .learn import autodiff as ad

SIGMA_FLOOR = 1e-3
SQRT2 = float(np.sqrt(2.0))
LOG_HALF_SQRT2 = float(np.log(SQRT2 / 2.0))


@dataclass(frozen=True)
class DepthPrediction:
    """Per-pixel depth mean (canonical units) and Laplace scale."""

    mean: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=np.float64)
        s = np.asarray(self.sigma, dtype=np.float64)
        if m.ndim != 2 or m.shape != s.shape:
            raise ValueError(f"mean {m.shape} and sigma {s.shape} must be matching 2-D maps")
        if np.any(s < SIGMA_FLOOR):
            raise ValueError(f"sigma must be >= {SIGMA_FLOOR}")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "sigma", s)

    def as_depth_map(self) -> DepthMap:
        return DepthMap(self.mean, self.sigma)


def depth_nll(pred: DepthPrediction, gt: DepthMap, lambda_hat: float = 1.0):
    """Summed Laplace negative log likelihood over valid ground-truth pixels.

    Predictions are in canonical units and divided by ``lambda_hat`` before
    comparison. Returns ``(loss_sum, n_valid)``.
    """
    if pred.mean.shape != gt.depth.shape:
        raise ValueError(f"prediction {pred.mean.shape} does not match depth map {gt.depth.shape}")
    if not lambda_hat > 0:
        raise ValueError("lambda_hat must be positive")
    valid = gt.valid()
    r = np.abs(gt.depth[valid] - pred.mean[valid] / lambda_hat)
    s = pred.sigma[valid]
    per_pixel = -LOG_HALF_SQRT2 + np.log(s) + SQRT2 * r / s
    return float(per_pixel.sum()), int(valid.sum())


def batch_depth_nll(mean, sigma, gt_depth: np.ndarray, valid: np.ndarray, inv_lambda: np.ndarray):
    """Differentiable per-pixel loss summed over valid pixels of each map.

    ``mean``/``sigma`` are tensors ``(B, P)``; ``gt_depth`` holds zeros where
    ``valid`` is False; ``inv_lambda`` is a constant ``(B, 1)`` array.
    """
    w = valid.astype(np.float64)
    r = ad.tabs(gt_depth - mean * inv_lambda)
    per_pixel = ad.log(sigma) + r * SQRT2 / sigma - LOG_HALF_SQRT2
    return ad.tsum(per_pixel * w, axis=-1)


def align_partial_cloud(pred: DepthPrediction, k: Calibration, g_hat: RigidPose, stride: int = 1) -> PointCloud:
    """Back-project predicted depth and move it to the canonical frame with ``g_hat^-1``."""
    cam = backproject(pred.as_depth_map(), k, stride=stride)
    return cam.transformed(g_hat.inverse())
