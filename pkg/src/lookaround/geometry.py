"""SO(3)/SE(3) primitives, pinhole back-projection and similarity alignment.

Conventions
-----------
A :class:`RigidPose` ``g = (R, T)`` maps world points to camera points,
``p_cam = R p_world + T``. ``compose(a, b)`` applies ``b`` first. Cameras
follow the OpenCV layout: x right, y down, z forward. Pixel ``(u, v)`` is
(column, row) with pixel centres at integer coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


class AlignmentError(ValueError):
    """Raised when a point configuration cannot fix a similarity transform."""


# --------------------------------------------------------------------------
# rotations
# --------------------------------------------------------------------------


def _canonical_quat(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if not n > 0:
        raise ValueError("quaternion must be non-zero")
    # leave unit quaternions untouched so that save/load is a fixed point
    if abs(n - 1.0) > 1e-14:
        q = q / n
    if q[0] < 0:
        q = -q
    return q


def quat_multiply(a, b):
    """Hamilton product of (w, x, y, z) quaternions, broadcasting over leading axes."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_to_matrix(q):
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    m = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return m.reshape(m.shape[:-1] + (3, 3))


def matrix_to_quat(m):
    """Shepperd's method; stable for every rotation angle."""
    m = np.asarray(m, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    diag = (m[0, 0], m[1, 1], m[2, 2])
    k = int(np.argmax((tr,) + diag))
    if k == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif k == 1:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif k == 2:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    return _canonical_quat(q)


@dataclass(frozen=True, eq=False)
class Rotation:
    """Unit quaternion ``(w, x, y, z)`` with ``w >= 0``."""

    q: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", _canonical_quat(self.q))

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_matrix(cls, m) -> "Rotation":
        return cls(matrix_to_quat(m))

    @classmethod
    def random(cls, rng: np.random.Generator) -> "Rotation":
        """Uniform over SO(3) (normalised 4-D Gaussian)."""
        return cls(rng.standard_normal(4))

    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def inverse(self) -> "Rotation":
        return Rotation(self.q * np.array([1.0, -1.0, -1.0, -1.0]))

    def __matmul__(self, other: "Rotation") -> "Rotation":
        return Rotation(quat_multiply(self.q, other.q))

    def apply(self, v) -> np.ndarray:
        return np.asarray(v, dtype=np.float64) @ self.matrix().T

    def angle(self) -> float:
        return 2.0 * float(np.arctan2(np.linalg.norm(self.q[1:]), self.q[0]))

    def __repr__(self):
        return f"Rotation(q={np.array2string(self.q, precision=6)})"


def so3_exp(omega) -> Rotation:
    """Rotation by angle ``|omega|`` about ``omega / |omega|``."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = float(np.linalg.norm(omega))
    if theta < 1e-8:
        k = 0.5 - theta * theta / 48.0
    else:
        k = np.sin(0.5 * theta) / theta
    return Rotation(np.concatenate([[np.cos(0.5 * theta)], k * omega]))


def so3_log(r: Rotation) -> np.ndarray:
    """Axis-angle vector of the principal logarithm; ``|result|`` is in [0, pi]."""
    v = r.q[1:]
    s = float(np.linalg.norm(v))
    if s < 1e-12:
        # first-order: q ~ (1, omega/2)
        return 2.0 * v
    theta = 2.0 * np.arctan2(s, r.q[0])
    return (theta / s) * v


def so3_log_matrix(m) -> np.ndarray:
    """Principal logarithm of a rotation matrix, returned as a vee'd 3-vector.

    Near angle pi the axis comes from the dominant eigenvector of the
    symmetric part, since the skew part vanishes there.
    """
    m = np.asarray(m, dtype=np.float64)
    skew = 0.5 * np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
    s = float(np.linalg.norm(skew))
    c = 0.5 * (np.trace(m) - 1.0)
    theta = float(np.arctan2(s, c))
    if theta < 1e-8:
        return skew
    if theta > np.pi - 1e-4:
        sym = 0.5 * (m + m.T) - c * np.eye(3)
        w, vecs = np.linalg.eigh(sym)
        axis = vecs[:, -1]
        if axis @ skew < 0:
            axis = -axis
        return theta * axis
    return (theta / s) * skew


def rotation_angle_matrix(m) -> float:
    """``2**-0.5 * ||ln M||_F``, the geodesic angle of a rotation matrix."""
    return float(np.linalg.norm(so3_log_matrix(m)))


# --------------------------------------------------------------------------
# rigid and similarity transforms
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RigidPose:
    rotation: Rotation
    translation: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(Rotation.identity(), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "RigidPose":
        m = np.asarray(m, dtype=np.float64)
        return cls(Rotation.from_matrix(m[:3, :3]), m[:3, 3])

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation.matrix()
        out[:3, 3] = self.translation
        return out

    def apply(self, pts) -> np.ndarray:
        return self.rotation.apply(pts) + self.translation

    def inverse(self) -> "RigidPose":
        rinv = self.rotation.inverse()
        return RigidPose(rinv, -rinv.apply(self.translation))

    def __matmul__(self, other: "RigidPose") -> "RigidPose":
        return compose(self, other)

    def camera_center(self) -> np.ndarray:
        return -self.rotation.inverse().apply(self.translation)

    def to_json(self) -> dict:
        return {"q": [float(x) for x in self.rotation.q], "t": [float(x) for x in self.translation]}

    @classmethod
    def from_json(cls, obj: dict) -> "RigidPose":
        return cls(Rotation(np.asarray(obj["q"], dtype=np.float64)), np.asarray(obj["t"], dtype=np.float64))

    def __repr__(self):
        return f"RigidPose(q={np.array2string(self.rotation.q, precision=5)}, t={np.array2string(self.translation, precision=5)})"


def compose(a: RigidPose, b: RigidPose) -> RigidPose:
    """``a * b``: apply ``b`` then ``a``."""
    return RigidPose(a.rotation @ b.rotation, a.rotation.apply(b.translation) + a.translation)


def inverse(g: RigidPose) -> RigidPose:
    return g.inverse()


def relative_pose(g_t: RigidPose, g_tp: RigidPose) -> RigidPose:
    """Camera motion from frame t to frame t': ``(R_t' R_t^T, T_t' - R_t't T_t)``."""
    r_rel = g_tp.rotation @ g_t.rotation.inverse()
    return RigidPose(r_rel, g_tp.translation - r_rel.apply(g_t.translation))


@dataclass(frozen=True, eq=False)
class SimilarityTransform:
    rotation: Rotation
    translation: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        object.__setattr__(self, "scale", float(self.scale))

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(Rotation.identity(), np.zeros(3), 1.0)

    def apply_to_centers(self, centers) -> np.ndarray:
        """Map gt-frame centres into the prediction frame: ``(R C + T) / s``."""
        return (self.rotation.apply(centers) + self.translation) / self.scale


# --------------------------------------------------------------------------
# cameras, depth maps and point clouds
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Calibration:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_json(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_json(cls, obj: dict) -> "Calibration":
        return cls(float(obj["fx"]), float(obj["fy"]), float(obj["cx"]), float(obj["cy"]),
                   int(obj["width"]), int(obj["height"]))


@dataclass(eq=False)
class DepthMap:
    """Row-major (height, width) depths; NaN marks a missing pixel."""

    depth: np.ndarray
    sigma: Optional[np.ndarray] = None

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.depth.ndim != 2 or self.depth.size == 0:
            raise ValueError("depth must be a non-empty 2-D array")
        if self.sigma is not None:
            self.sigma = np.asarray(self.sigma, dtype=np.float64)
            if self.sigma.shape != self.depth.shape:
                raise ValueError("sigma plane must match depth dimensions")

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    def valid(self) -> np.ndarray:
        return np.isfinite(self.depth) & (self.depth > 0)


@dataclass(eq=False)
class PointCloud:
    points: np.ndarray
    confidence: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")
        if self.confidence is not None:
            self.confidence = np.asarray(self.confidence, dtype=np.float64).reshape(-1)
            if self.confidence.shape[0] != self.points.shape[0]:
                raise ValueError("one confidence per point required")
            if np.any(self.confidence < 0):
                raise ValueError("confidence must be non-negative")

    def __len__(self) -> int:
        return self.points.shape[0]

    def subset(self, idx) -> "PointCloud":
        conf = None if self.confidence is None else self.confidence[idx]
        return PointCloud(self.points[idx], conf)

    def transformed(self, g: RigidPose) -> "PointCloud":
        return PointCloud(g.apply(self.points), self.confidence)


def pixel_grid(width: int, height: int, stride: int = 1):
    v, u = np.mgrid[0:height:stride, 0:width:stride]
    return u.astype(np.float64), v.astype(np.float64)


def backproject(depth: DepthMap, k: Calibration, stride: int = 1, return_pixels: bool = False):
    """Camera-frame points ``((u-cx)/fx d, (v-cy)/fy d, d)`` for valid sampled pixels.

    When the depth map carries a sigma plane, point confidence is ``1/sigma``.
    With ``return_pixels`` the ``(N, 2)`` array of ``(u, v)`` is returned too.
    """
    if depth.width != k.width or depth.height != k.height:
        raise ValueError(
            f"depth map is {depth.width}x{depth.height}, calibration is {k.width}x{k.height}"
        )
    if stride < 1:
        raise ValueError("stride must be >= 1")
    u, v = pixel_grid(k.width, k.height, stride)
    d = depth.depth[::stride, ::stride]
    ok = np.isfinite(d) & (d > 0)
    u, v, d = u[ok], v[ok], d[ok]
    pts = np.stack([(u - k.cx) / k.fx * d, (v - k.cy) / k.fy * d, d], axis=-1)
    conf = None
    if depth.sigma is not None:
        conf = 1.0 / depth.sigma[::stride, ::stride][ok]
    cloud = PointCloud(pts, conf)
    if return_pixels:
        return cloud, np.stack([u, v], axis=-1)
    return cloud


def project(points, k: Calibration) -> np.ndarray:
    """Pinhole projection of camera-frame points to ``(u, v)``."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return np.stack([k.fx * p[:, 0] / p[:, 2] + k.cx, k.fy * p[:, 1] / p[:, 2] + k.cy], axis=-1)


# --------------------------------------------------------------------------
# global alignment
# --------------------------------------------------------------------------


def umeyama_align(gt_centers, pred_centers, with_scale: bool = True) -> SimilarityTransform:
    """Similarity ``(R_G, T_G, s_G)`` minimising ``sum |(R_G C_i + T_G)/s_G - C^_i|^2``.

    ``gt_centers`` and ``pred_centers`` are ``(N, 3)`` arrays or point clouds.
    With ``with_scale=False`` the scale is pinned to 1 (rigid alignment).
    """
    x = np.asarray(getattr(gt_centers, "points", gt_centers), dtype=np.float64)
    y = np.asarray(getattr(pred_centers, "points", pred_centers), dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2 or x.shape[1] != 3:
        raise ValueError("need two (N, 3) arrays of equal shape")
    n = x.shape[0]
    if n < 3:
        raise AlignmentError("at least three correspondences are required")
    mx, my = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - mx, y - my
    var_x = float((xc * xc).sum()) / n
    cov = yc.T @ xc / n
    u, d, vt = np.linalg.svd(cov)
    # collinear or coincident sources leave the rotation about the line undetermined
    if var_x <= 0 or d[1] <= 1e-12 * max(d[0], 1e-300):
        raise AlignmentError("degenerate (collinear or coincident) configuration")
    sign = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[2] = -1.0
    r = u @ np.diag(sign) @ vt
    c = float((d * sign).sum() / var_x) if with_scale else 1.0
    if not c > 0:
        raise AlignmentError("non-positive scale estimate")
    t = my - c * r @ mx
    s_g = 1.0 / c
    return SimilarityTransform(Rotation.from_matrix(r), t * s_g, s_g)


def adjust_pose(g_hat: RigidPose, t_g: SimilarityTransform) -> RigidPose:
    """``(R^ R_G, R^ T_G + s_G T^)``: a prediction expressed in the gt frame."""
    return RigidPose(
        g_hat.rotation @ t_g.rotation,
        g_hat.rotation.apply(t_g.translation) + t_g.scale * g_hat.translation,
    )


def look_at(center, target, up=(0.0, 0.0, 1.0)) -> RigidPose:
    """World-to-camera pose of a camera at ``center`` looking at ``target``."""
    center = np.asarray(center, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - center
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        raise ValueError("viewing direction is parallel to the up vector")
    right /= nr
    down = np.cross(fwd, right)
    r = np.stack([right, down, fwd])
    return RigidPose(Rotation.from_matrix(r), -r @ center)
