"""Batched, differentiable rotation primitives on :class:`Tensor` values.

Rotations are carried as unit quaternions ``(w, x, y, z)`` along the last
axis. The exponential map goes through ``half_sinc`` so it stays smooth at the
origin, and angles use ``2 atan2(|v|, |w|)`` which is well conditioned on the
whole range ``[0, pi]``.
"""

from __future__ import annotations

from . import autodiff as ad
from .autodiff import Tensor


def exp_quat(omega: Tensor) -> Tensor:
    """Axis-angle vectors ``(..., 3)`` to unit quaternions ``(..., 4)``."""
    theta = ad.norm(omega, axis=-1, keepdims=True)
    w = ad.cos(theta * 0.5)
    v = omega * ad.half_sinc(theta)
    return ad.concat([w, v], axis=-1)


def quat_conj(q: Tensor) -> Tensor:
    return ad.concat([q[..., 0:1], -q[..., 1:4]], axis=-1)


def quat_mul(a: Tensor, b: Tensor) -> Tensor:
    aw, ax, ay, az = (a[..., i] for i in range(4))
    bw, bx, by, bz = (b[..., i] for i in range(4))
    return ad.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_angle(q: Tensor) -> Tensor:
    """Rotation angle in ``[0, pi]`` of each (unit) quaternion."""
    return ad.atan2(ad.norm(q[..., 1:4], axis=-1), ad.tabs(q[..., 0])) * 2.0


def quat_matrix(q: Tensor) -> Tensor:
    """Unit quaternions ``(..., 4)`` to rotation matrices ``(..., 3, 3)``."""
    w, x, y, z = (q[..., i] for i in range(4))
    rows = [
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ]
    return ad.stack([ad.stack(r, axis=-1) for r in rows], axis=-2)


def rotate(q: Tensor, v: Tensor) -> Tensor:
    """Apply quaternion rotations to vectors ``(..., 3)``."""
    m = quat_matrix(q)
    return ad.reshape(m @ ad.reshape(v, v.shape + (1,)), v.shape)


def relative(q_t: Tensor, t_t: Tensor, q_tp: Tensor, t_tp: Tensor):
    """Relative pose ``(q_tp q_t^-1, T_tp - R_rel T_t)`` for batched poses."""
    q_rel = quat_mul(q_tp, quat_conj(q_t))
    return q_rel, t_tp - rotate(q_rel, t_t)
