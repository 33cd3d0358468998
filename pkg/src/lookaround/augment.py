"""Geometry-aware augmentation: re-render a frame from a perturbed viewpoint.

Every valid depth pixel is lifted to 3-D, moved into the perturbed camera and
splatted onto its nearest target pixel. A z-buffer keeps the closest sample;
target pixels that receive nothing stay invalid (holes are not filled).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Union

import numpy as np

from .depth import DepthPrediction
from .geometry import DepthMap, RigidPose, Rotation, backproject, compose, so3_exp
from .kernels import zbuffer_splat
from .synth import Frame, depth_descriptor


@dataclass(frozen=True)
class PerturbationConfig:
    max_angle: float = np.deg2rad(10.0)  # radians
    lateral: float = 0.3  # world units, bound on each sideways axis
    forward_mean: float = 0.3  # world units, mean motion along the optical axis
    seed: int = 0

    def __post_init__(self):
        if min(self.max_angle, self.lateral, self.forward_mean) < 0:
            raise ValueError("perturbation bounds must be non-negative")

    @classmethod
    def for_radius(cls, radius: float, seed: int = 0) -> "PerturbationConfig":
        """Defaults scaled to an orbit: 10 degrees, 5% lateral, 5% forward."""
        return cls(np.deg2rad(10.0), 0.05 * radius, 0.05 * radius, seed)

    def scaled(self, factor: float) -> "PerturbationConfig":
        return replace(self, max_angle=self.max_angle * factor, lateral=self.lateral * factor,
                       forward_mean=self.forward_mean * factor)


def sample_perturbation(cfg: PerturbationConfig, rng) -> RigidPose:
    """Camera-frame motion ``delta`` applied as ``g* = delta g``.

    The rotation vector is uniform in the ball of radius ``max_angle``; the
    translation is uniform in ``[-lateral, lateral]`` sideways and uniform in
    ``[0, 2 forward_mean]`` along the viewing direction, so the camera moves
    towards the scene on average.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    angle = cfg.max_angle * rng.uniform() ** (1.0 / 3.0)
    lateral = cfg.lateral * rng.uniform(-1.0, 1.0, 2)
    forward = cfg.forward_mean * rng.uniform(0.0, 2.0)
    # points ahead of a camera that moves forward by f get closer: z' = z - f
    return RigidPose(so3_exp(axis * angle), np.array([-lateral[0], -lateral[1], -forward]))


def forward_component(delta: RigidPose) -> float:
    return float(-delta.translation[2])


def _warp_depth(depth: DepthMap, k, delta: RigidPose) -> DepthMap:
    cloud = backproject(DepthMap(depth.depth), k)
    p = delta.apply(cloud.points)
    z = p[:, 2]
    front = z > 0
    p, z = p[front], z[front]
    u = np.rint(k.fx * p[:, 0] / z + k.cx)
    v = np.rint(k.fy * p[:, 1] / z + k.cy)
    inside = (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
    out, _ = zbuffer_splat(u[inside].astype(np.int64), v[inside].astype(np.int64), z[inside], k.width, k.height)
    return DepthMap(out)


def dibr_warp(frame: Frame, depth_source: Union[DepthMap, DepthPrediction, None], delta: RigidPose,
              gt_scale: float = 1.0):
    """Synthesize the view from ``g* = delta g``.

    ``depth_source`` defaults to the frame's own depth and must be expressed
    in the frame's units. ``gt_scale`` converts ``delta`` into ground-truth
    units for the hidden global pose. Returns ``(frame, g*, depth)``.
    """
    src = frame.depth if depth_source is None else depth_source
    if isinstance(src, DepthPrediction):
        src = DepthMap(src.mean)
    k = frame.calibration
    if src.width != k.width or src.height != k.height:
        raise ValueError("depth source does not match the calibration")
    new_depth = _warp_depth(src, k, delta)
    g_star = compose(delta, frame.observed_pose)
    delta_gt = RigidPose(delta.rotation, delta.translation * gt_scale)
    new_frame = Frame(frame.index, k, g_star, compose(delta_gt, frame.gt_global_pose), new_depth,
                      depth_descriptor(new_depth))
    return new_frame, g_star, new_depth


def silhouette(dm: DepthMap) -> np.ndarray:
    """Valid pixels plus holes enclosed by valid pixels along both the row and the column."""
    v = dm.valid()
    left = np.maximum.accumulate(v, axis=1)
    right = np.maximum.accumulate(v[:, ::-1], axis=1)[:, ::-1]
    up = np.maximum.accumulate(v, axis=0)
    down = np.maximum.accumulate(v[::-1], axis=0)[::-1]
    return v | (left & right & up & down)


def hole_fraction(dm: DepthMap) -> float:
    """Fraction of pixels without a depth value."""
    return float(1.0 - dm.valid().mean())


def identity_delta() -> RigidPose:
    return RigidPose(Rotation.identity(), np.zeros(3))
