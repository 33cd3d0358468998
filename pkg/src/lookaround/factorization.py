"""Siamese viewpoint-factorization losses and the per-sequence scale estimator.

A predictor outputs an absolute pose for every frame. Only relative poses
within a sequence are compared against the observed track, so any rigid motion
applied to a whole sequence of predictions cancels out.

Two implementations live here: a scalar numpy reference built on
:mod:`lookaround.geometry`, and batched differentiable versions used by the
trainer. Tests check that they agree.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import RigidPose, relative_pose, rotation_angle_matrix
from .learn import autodiff as ad
from .learn import lie
from .synth import ConfigError

SIGMA_FLOOR = 1e-3
BASELINE_EPS = 1e-6
SQRT2 = float(np.sqrt(2.0))


class DegeneratePair(ValueError):
    """A pair whose relative translation is too short to normalise or to compare."""


@dataclass(frozen=True)
class PosePrediction:
    pose: RigidPose
    sigma_r: float = 1.0
    sigma_t: float = 1.0

    def __post_init__(self):
        if not (self.sigma_r >= SIGMA_FLOOR and self.sigma_t >= SIGMA_FLOOR):
            raise ValueError(f"confidence scales must be >= {SIGMA_FLOOR}")


@dataclass(frozen=True)
class ScaleEstimate:
    sequence_id: int
    lambda_hat: float = 1.0
    ema_decay: float = 0.99
    count: int = 0

    def __post_init__(self):
        if not self.lambda_hat > 0:
            raise ValueError("lambda_hat must be positive")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in (0, 1)")


def sigma_from_raw(raw):
    """Positive confidence scale: softplus followed by a floor."""
    if isinstance(raw, ad.Tensor):
        return ad.maximum(ad.softplus(raw), SIGMA_FLOOR)
    raw = np.asarray(raw, dtype=np.float64)
    return np.maximum(np.logaddexp(0.0, raw), SIGMA_FLOOR)


def _unit(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if n <= BASELINE_EPS:
        raise DegeneratePair("relative translation shorter than the baseline threshold")
    return v / n


# -- reference (numpy) implementation --------------------------------------


def siamese_losses(pred_t: PosePrediction, pred_tp: PosePrediction, obs_t: RigidPose, obs_tp: RigidPose,
                   normalize_translation: bool = False):
    """Rotation and translation discrepancies ``(l_R, l_T)`` of one frame pair.

    ``l_R`` is the Frobenius norm of the principal log of
    ``R_hat_rel R_rel^T``, which equals ``sqrt(2)`` times its angle.
    """
    rel_hat = relative_pose(pred_t.pose, pred_tp.pose)
    rel_obs = relative_pose(obs_t, obs_tp)
    l_r = SQRT2 * rotation_angle_matrix(rel_hat.rotation.matrix() @ rel_obs.rotation.matrix().T)
    t_hat, t_obs = rel_hat.translation, rel_obs.translation
    if normalize_translation:
        t_hat, t_obs = _unit(t_hat), _unit(t_obs)
    return l_r, float(np.linalg.norm(t_hat - t_obs))


def gaussian_translation_nll(l_t, sigma_t):
    """Negative log density of an isotropic 3-D Gaussian residual of norm ``l_t``."""
    return 1.5 * np.log(2 * np.pi * sigma_t ** 2) + 0.5 * l_t ** 2 / sigma_t ** 2


def laplace_rotation_nll(l_r, sigma_r):
    """``ln sigma_R + sqrt(2) l_R / sigma_R``; the normaliser constant is dropped."""
    return np.log(sigma_r) + SQRT2 * l_r / sigma_r


def siamese_nll(pred_t: PosePrediction, pred_tp: PosePrediction, obs_t: RigidPose, obs_tp: RigidPose,
                normalize_translation: bool = False):
    """Probabilistic pair losses ``(L_R, L_T)`` with additively composed scales."""
    l_r, l_t = siamese_losses(pred_t, pred_tp, obs_t, obs_tp, normalize_translation)
    sigma_r = pred_t.sigma_r + pred_tp.sigma_r
    sigma_t = pred_t.sigma_t + pred_tp.sigma_t
    return float(laplace_rotation_nll(l_r, sigma_r)), float(gaussian_translation_nll(l_t, sigma_t))


def update_scale(est: ScaleEstimate, pred_t: PosePrediction, pred_tp: PosePrediction,
                 obs_t: RigidPose, obs_tp: RigidPose) -> ScaleEstimate:
    """One moving-average step of ``lambda_hat`` towards ``|T_hat_rel| / |T_rel|``."""
    t_obs = np.linalg.norm(relative_pose(obs_t, obs_tp).translation)
    if t_obs <= BASELINE_EPS:
        raise DegeneratePair("observed baseline too short for a scale update")
    ratio = np.linalg.norm(relative_pose(pred_t.pose, pred_tp.pose).translation) / t_obs
    return ema_scale(est, ratio)


def ema_scale(est: ScaleEstimate, ratio: float) -> ScaleEstimate:
    lam = est.ema_decay * est.lambda_hat + (1.0 - est.ema_decay) * float(ratio)
    if not lam > 0:
        raise DegeneratePair("scale ratio collapsed to zero")
    return replace(est, lambda_hat=lam, count=est.count + 1)


def sample_pairs(n_frames: int, n_pairs: int, min_gap: int = 1, seed=0):
    """Frame-index pairs ``(t, t')`` with ``t < t'`` and ``t' - t >= min_gap``.

    The gap is drawn uniformly over the admissible gaps and the first index
    uniformly given the gap.
    """
    if n_frames < 2:
        raise ConfigError("a sequence needs at least two frames")
    if min_gap < 1 or min_gap >= n_frames:
        raise ConfigError(f"min_gap must lie in [1, {n_frames - 1}], got {min_gap}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    gaps = rng.integers(min_gap, n_frames, size=n_pairs)
    first = np.floor(rng.random(n_pairs) * (n_frames - gaps)).astype(np.int64)
    return np.stack([first, first + gaps], axis=1)


# -- batched differentiable versions ----------------------------------------


def batch_losses(q_t, t_t, q_tp, t_tp, q_rel_obs, t_rel_obs, normalize_translation: bool):
    """Per-pair ``(l_R, l_T)`` tensors for batched quaternion predictions.

    ``q_rel_obs``/``t_rel_obs`` are constant arrays of observed relative poses.
    ``normalize_translation`` may be a flag or a per-pair boolean array.
    Pairs with a degenerate observed baseline must be filtered out beforehand.
    """
    q_rel, t_rel = lie.relative(q_t, t_t, q_tp, t_tp)
    diff = lie.quat_mul(q_rel, lie.quat_conj(ad.Tensor(q_rel_obs)))
    l_r = lie.quat_angle(diff) * SQRT2
    t_obs = np.asarray(t_rel_obs, dtype=np.float64)
    norm_mask = np.broadcast_to(np.asarray(normalize_translation, dtype=bool), t_obs.shape[:-1])[..., None]
    if norm_mask.any():
        denom = ad.where(norm_mask, ad.maximum(ad.norm(t_rel, axis=-1, keepdims=True), BASELINE_EPS), 1.0)
        t_rel = t_rel / denom
        t_obs = np.where(norm_mask, t_obs / np.linalg.norm(t_obs, axis=-1, keepdims=True), t_obs)
    l_t = ad.norm(t_rel - t_obs, axis=-1)
    return l_r, l_t


def batch_nll(l_r, l_t, sigma_r, sigma_t):
    """Per-pair ``(L_R, L_T)`` from discrepancies and composed confidence scales."""
    big_r = ad.log(sigma_r) + l_r * SQRT2 / sigma_r
    big_t = ad.log(sigma_t * sigma_t * (2 * np.pi)) * 1.5 + l_t * l_t * 0.5 / (sigma_t * sigma_t)
    return big_r, big_t
