"""Synthetic object categories, orbit renderings and simulated SFM tracks.

Each instance is a union of two superellipsoids: a body centred at the
origin and an off-centre "cabin" that breaks the body's point symmetry so
that every viewpoint is distinguishable from appearance. Sequences orbit the
instance; the simulated reconstruction hides a random rigid motion ``h`` and
(for SFM-like sequences) a scale ``lam`` from the learner.

Scale convention: the metric camera pose is ``(R, lam * T_obs)``, so observed
translations and depths equal ground truth divided by ``lam``.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from functools import lru_cache
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .geometry import (
    Calibration,
    DepthMap,
    PointCloud,
    RigidPose,
    Rotation,
    backproject,
    compose,
    look_at,
    so3_exp,
)

SFM = "sfm"
KF = "kf"
DESCRIPTOR_GRID = 16


class ConfigError(ValueError):
    """Invalid generator configuration."""


def sequence_rng(seed: int, seq_id: int, stream: int) -> np.random.Generator:
    """Independent RNG stream per (seed, sequence, purpose)."""
    return np.random.default_rng([int(seed), int(seq_id), int(stream)])


def worker_count() -> int:
    n = int(os.environ.get("LOOKAROUND_THREADS", "0") or 0)
    return n if n > 0 else (os.cpu_count() or 1)


# --------------------------------------------------------------------------
# shapes
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Superellipsoid:
    a: float
    b: float
    c: float
    e1: float
    e2: float
    center: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if min(self.a, self.b, self.c) <= 0:
            raise ConfigError("half-axes must be positive")
        if not (0.3 <= self.e1 <= 2.0 and 0.3 <= self.e2 <= 2.0):
            raise ConfigError("exponents must lie in [0.3, 2]")

    @property
    def bound(self) -> float:
        return float(np.sqrt(self.a ** 2 + self.b ** 2 + self.c ** 2))

    def inside_outside(self, p) -> np.ndarray:
        """Implicit function; < 1 inside, 1 on the surface."""
        p = np.asarray(p, dtype=np.float64) - np.asarray(self.center)
        x = np.abs(p[..., 0] / self.a) ** (2.0 / self.e2)
        y = np.abs(p[..., 1] / self.b) ** (2.0 / self.e2)
        z = np.abs(p[..., 2] / self.c) ** (2.0 / self.e1)
        return (x + y) ** (self.e2 / self.e1) + z

    def surface(self, eta, omega) -> np.ndarray:
        """Parametric surface point for latitude ``eta`` and longitude ``omega``."""

        def spow(v, e):
            return np.sign(v) * np.abs(v) ** e

        ce, se = np.cos(eta), np.sin(eta)
        co, so = np.cos(omega), np.sin(omega)
        x = self.a * spow(ce, self.e1) * spow(co, self.e2)
        y = self.b * spow(ce, self.e1) * spow(so, self.e2)
        z = self.c * spow(se, self.e1)
        return np.stack([x, y, z], axis=-1) + np.asarray(self.center)

    def to_json(self) -> dict:
        return {"a": self.a, "b": self.b, "c": self.c, "e1": self.e1, "e2": self.e2,
                "center": list(self.center)}

    @classmethod
    def from_json(cls, obj) -> "Superellipsoid":
        return cls(obj["a"], obj["b"], obj["c"], obj["e1"], obj["e2"], tuple(obj["center"]))


@lru_cache(maxsize=64)
def _surface_cells(part: Superellipsoid, n_eta: int = 256, n_omega: int = 512):
    """Parameter-space grid cells of a part with their surface areas."""
    d_eta, d_om = np.pi / n_eta, 2 * np.pi / n_omega
    eta = -np.pi / 2 + d_eta * np.arange(n_eta + 1)
    om = -np.pi + d_om * np.arange(n_omega + 1)
    e, o = np.meshgrid(eta, om, indexing="ij")
    p = part.surface(e, o)
    d1 = p[1:, 1:] - p[:-1, :-1]
    d2 = p[1:, :-1] - p[:-1, 1:]
    area = 0.5 * np.linalg.norm(np.cross(d1, d2), axis=-1)
    e0, o0 = np.meshgrid(eta[:-1], om[:-1], indexing="ij")
    return e0.ravel(), o0.ravel(), area.ravel(), d_eta, d_om


@dataclass(frozen=True)
class InstanceShape:
    body: Superellipsoid
    cabin: Optional[Superellipsoid] = None
    n_points: int = 4096

    @property
    def parts(self):
        return (self.body,) if self.cabin is None else (self.body, self.cabin)

    @property
    def extent(self) -> float:
        """Largest distance from the origin to a point of the shape's bounds."""
        ext = max(self.body.a, self.body.b, self.body.c)
        if self.cabin is not None:
            c = np.abs(np.asarray(self.cabin.center))
            ext = max(ext, float(np.linalg.norm(c + [self.cabin.a, self.cabin.b, self.cabin.c])))
        return float(ext)

    def inside_outside(self, p) -> np.ndarray:
        return np.minimum.reduce([part.inside_outside(p) for part in self.parts])

    def sample_surface(self, n: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """Area-uniform points on the outer surface of the union (hidden interiors removed)."""
        n = self.n_points if n is None else n
        rng = rng or np.random.default_rng(0)
        cells = [_surface_cells(part) for part in self.parts]
        areas = np.array([c[2].sum() for c in cells])
        out, got = [], 0
        while got < n:
            m = 2 * (n - got) + 16
            which = rng.choice(len(self.parts), size=m, p=areas / areas.sum())
            pts = np.empty((m, 3))
            for i, part in enumerate(self.parts):
                sel = which == i
                k = int(sel.sum())
                if k == 0:
                    continue
                eta0, om0, area, d_eta, d_om = cells[i]
                c = rng.choice(area.size, size=k, p=area / area.sum())
                eta = eta0[c] + d_eta * rng.uniform(size=k)
                om = om0[c] + d_om * rng.uniform(size=k)
                pts[sel] = part.surface(eta, om)
            keep = np.ones(m, dtype=bool)
            for i, part in enumerate(self.parts):
                for j, other in enumerate(self.parts):
                    if j != i:
                        keep &= ~((which == i) & (other.inside_outside(pts) < 1.0))
            pts = pts[keep][: n - got]
            out.append(pts)
            got += len(pts)
        return np.concatenate(out)

    def to_json(self) -> dict:
        return {"body": self.body.to_json(),
                "cabin": None if self.cabin is None else self.cabin.to_json(),
                "n_points": self.n_points}

    @classmethod
    def from_json(cls, obj) -> "InstanceShape":
        cabin = None if obj.get("cabin") is None else Superellipsoid.from_json(obj["cabin"])
        return cls(Superellipsoid.from_json(obj["body"]), cabin, int(obj.get("n_points", 4096)))


@dataclass(frozen=True)
class CategoryConfig:
    """Parameter ranges ``(low, high)`` for a car-like category."""

    length: tuple = (1.75, 2.05)
    width: tuple = (0.8, 0.9)
    height: tuple = (0.49, 0.56)
    e1: tuple = (0.44, 0.61)
    e2: tuple = (0.44, 0.61)
    cabin_length: tuple = (0.5, 0.6)  # fraction of body length
    cabin_width: tuple = (0.82, 0.88)  # fraction of body width
    cabin_height: tuple = (0.4, 0.5)  # world units
    cabin_offset: tuple = (-0.39, -0.26)  # fraction of body length, along x
    cabin: bool = True
    n_points: int = 4096

    def ranges(self) -> dict:
        names = ["length", "width", "height", "e1", "e2",
                 "cabin_length", "cabin_width", "cabin_height", "cabin_offset"]
        return {k: getattr(self, k) for k in names}


def generate_category(seed: int, n_instances: int, category_config: CategoryConfig = CategoryConfig()):
    """Deterministic list of ``n_instances`` shapes drawn from the configured ranges."""
    if n_instances < 1:
        raise ConfigError("n_instances must be >= 1")
    for name, (lo, hi) in category_config.ranges().items():
        if not lo <= hi:
            raise ConfigError(f"empty range for {name}: ({lo}, {hi})")
    rng = np.random.default_rng([int(seed), 0x5EED])
    cfg = category_config
    shapes = []
    for _ in range(n_instances):
        u = {k: rng.uniform(lo, hi) for k, (lo, hi) in cfg.ranges().items()}
        body = Superellipsoid(u["length"], u["width"], u["height"], u["e1"], u["e2"])
        cabin = None
        if cfg.cabin:
            cabin = Superellipsoid(
                u["cabin_length"] * u["length"],
                u["cabin_width"] * u["width"],
                u["cabin_height"],
                0.6,
                0.6,
                (u["cabin_offset"] * u["length"], 0.0, u["height"] * 0.75),
            )
        shapes.append(InstanceShape(body, cabin, cfg.n_points))
    return shapes


# --------------------------------------------------------------------------
# rendering
# --------------------------------------------------------------------------


def default_calibration(size: int = 32) -> Calibration:
    f = 40.0 * size / 32.0
    c = (size - 1) / 2.0
    return Calibration(f, f, c, c, size, size)


@dataclass(frozen=True)
class OrbitConfig:
    n_frames: int = 36
    radius: float = 6.0
    elevation_deg: float = 20.0
    elevation_jitter_deg: float = 10.0
    azimuth_jitter_deg: float = 3.0
    random_start: bool = True


def _ray_hit_part(part: Superellipsoid, origins, dirs, n_steps=96, n_bisect=60):
    """Smallest ray parameter t > 0 with ``F(o + t d) <= 1``; inf when missed."""
    center = np.asarray(part.center)
    oc = origins - center
    dd = np.einsum("ij,ij->i", dirs, dirs)
    b = np.einsum("ij,ij->i", oc, dirs)
    cc = np.einsum("ij,ij->i", oc, oc) - part.bound ** 2
    disc = b * b - dd * cc
    t_hit = np.full(len(dirs), np.inf)
    cand = np.nonzero(disc > 0)[0]
    if cand.size == 0:
        return t_hit
    sq = np.sqrt(disc[cand])
    t0 = np.maximum((-b[cand] - sq) / dd[cand], 0.0)
    t1 = (-b[cand] + sq) / dd[cand]
    ts = t0[:, None] + (t1 - t0)[:, None] * np.linspace(0.0, 1.0, n_steps)[None, :]
    pts = origins[cand, None, :] + ts[..., None] * dirs[cand, None, :]
    inside = part.inside_outside(pts) <= 1.0
    first = np.argmax(inside, axis=1)
    hit = inside[np.arange(len(cand)), first] & (first > 0)
    rows = np.nonzero(hit)[0]
    lo = ts[rows, first[rows] - 1]
    hi = ts[rows, first[rows]]
    o = origins[cand[rows]]
    d = dirs[cand[rows]]
    for _ in range(n_bisect):
        mid = 0.5 * (lo + hi)
        ins = part.inside_outside(o + mid[:, None] * d) <= 1.0
        hi = np.where(ins, mid, hi)
        lo = np.where(ins, lo, mid)
    t_hit[cand[rows]] = hi
    return t_hit


def render_depth(shape: InstanceShape, pose: RigidPose, k: Calibration) -> DepthMap:
    """Ray-cast z-depth of ``shape`` seen from camera ``pose``; background is NaN."""
    v, u = np.mgrid[0:k.height, 0:k.width]
    d_cam = np.stack([(u.ravel() - k.cx) / k.fx, (v.ravel() - k.cy) / k.fy, np.ones(u.size)], axis=-1)
    rot_t = pose.rotation.matrix().T
    dirs = d_cam @ rot_t.T  # world directions, z-component in camera frame is 1
    origin = pose.camera_center()
    origins = np.broadcast_to(origin, dirs.shape).copy()
    t = np.minimum.reduce([_ray_hit_part(p, origins, dirs) for p in shape.parts])
    depth = np.where(np.isfinite(t), t, np.nan).reshape(k.height, k.width)
    return DepthMap(depth)


def depth_descriptor(depth: DepthMap, grid: int = DESCRIPTOR_GRID) -> np.ndarray:
    """``grid x grid`` block-averaged nearness image, flattened.

    Valid blocks are range-normalised to [0.1, 1] (nearest = 1); blocks with
    no valid pixel are 0.
    """
    h, w = depth.height, depth.width
    rows = (np.arange(grid + 1) * h) // grid
    cols = (np.arange(grid + 1) * w) // grid
    valid = depth.valid()
    d = np.where(valid, depth.depth, 0.0)
    out = np.zeros((grid, grid))
    ok = np.zeros((grid, grid), dtype=bool)
    for i in range(grid):
        for j in range(grid):
            blk = valid[rows[i]:rows[i + 1], cols[j]:cols[j + 1]]
            if blk.any():
                out[i, j] = d[rows[i]:rows[i + 1], cols[j]:cols[j + 1]][blk].mean()
                ok[i, j] = True
    if ok.any():
        lo, hi = out[ok].min(), out[ok].max()
        span = hi - lo
        near = np.ones_like(out) if span <= 0 else (hi - out) / span
        out = np.where(ok, 0.1 + 0.9 * near, 0.0)
    return out.ravel()


@dataclass(eq=False)
class Frame:
    index: int
    calibration: Calibration
    observed_pose: RigidPose
    gt_global_pose: RigidPose
    depth: DepthMap
    descriptor: np.ndarray


@dataclass(eq=False)
class Sequence:
    id: int
    frames: list
    gt_alignment: RigidPose = field(default_factory=RigidPose.identity)
    gt_scale: float = 1.0
    modality: str = SFM
    shape: Optional[InstanceShape] = None
    augmented: bool = False

    def __post_init__(self):
        if len(self.frames) < 2:
            raise ConfigError("a sequence needs at least two frames")
        if self.modality not in (SFM, KF):
            raise ConfigError(f"unknown modality {self.modality!r}")
        if self.modality == KF and self.gt_scale != 1.0:
            raise ConfigError("kf-like sequences have unit scale")

    def __len__(self):
        return len(self.frames)


def orbit_poses(orbit: OrbitConfig, rng: np.random.Generator):
    start = rng.uniform(0, 2 * np.pi) if orbit.random_start else 0.0
    poses = []
    for t in range(orbit.n_frames):
        az = start + 2 * np.pi * t / orbit.n_frames
        az += np.deg2rad(orbit.azimuth_jitter_deg) * rng.uniform(-1, 1)
        el = np.deg2rad(orbit.elevation_deg + orbit.elevation_jitter_deg * rng.uniform(-1, 1))
        center = orbit.radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        poses.append(look_at(center, np.zeros(3)))
    return poses


def render_sequence(shape: InstanceShape, orbit_config: OrbitConfig, calibration: Calibration,
                    seed: int, seq_id: int = 0, modality: str = SFM) -> Sequence:
    """Ground-truth track: observed pose = global pose, no noise, unit scale."""
    if orbit_config.radius <= shape.extent:
        raise ConfigError("orbit radius must exceed the object's extent (camera inside object)")
    if orbit_config.n_frames < 2:
        raise ConfigError("an orbit needs at least two frames")
    rng = sequence_rng(seed, seq_id, 1)
    frames = []
    for t, g in enumerate(orbit_poses(orbit_config, rng)):
        dm = render_depth(shape, g, calibration)
        frames.append(Frame(t, calibration, g, g, dm, depth_descriptor(dm)))
    return Sequence(seq_id, frames, RigidPose.identity(), 1.0, modality, shape)


# --------------------------------------------------------------------------
# simulated reconstruction
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseConfig:
    depth_sigma: float = 0.01  # fraction of orbit radius
    outlier_fraction: float = 0.1
    hole_fraction: float = 0.2
    radius: float = 6.0
    random_alignment: bool = True
    random_scale: bool = True
    scale_range: tuple = (0.5, 2.0)
    # frames whose reconstructed pose is corrupted (failed registration)
    pose_outlier_fraction: float = 0.0
    pose_outlier_center_deg: float = 0.0  # canonical azimuth of the failing arc
    pose_outlier_angle_deg: float = 90.0

    @classmethod
    def off(cls, **kw) -> "NoiseConfig":
        base = dict(depth_sigma=0.0, outlier_fraction=0.0, hole_fraction=0.0)
        base.update(kw)
        return cls(**base)


def _blob_holes(valid: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Mask of pixels dropped in random discs until ``fraction`` of valid ones are gone."""
    drop = np.zeros_like(valid)
    n_valid = int(valid.sum())
    target = int(round(fraction * n_valid))
    if target == 0:
        return drop
    h, w = valid.shape
    vv, uu = np.mgrid[0:h, 0:w]
    ys, xs = np.nonzero(valid)
    for _ in range(10 * n_valid):
        if int((drop & valid).sum()) >= target:
            break
        i = rng.integers(len(ys))
        r = rng.uniform(0.8, 2.5)
        disc = (vv - ys[i]) ** 2 + (uu - xs[i]) ** 2 <= r * r
        remaining = target - int((drop & valid).sum())
        new = disc & valid & ~drop
        if new.sum() > remaining:
            # trim the last blob so the dropped fraction is exact
            idx = np.flatnonzero(new)
            dist = ((vv.ravel()[idx] - ys[i]) ** 2 + (uu.ravel()[idx] - xs[i]) ** 2)
            idx = idx[np.argsort(dist, kind="stable")[:remaining]]
            new = np.zeros_like(new)
            new.ravel()[idx] = True
        drop |= new
    return drop & valid


def corrupt_depth(dm: DepthMap, noise: NoiseConfig, scale: float, rng: np.random.Generator) -> DepthMap:
    depth = dm.depth.copy()
    valid = dm.valid()
    if noise.depth_sigma > 0:
        sigma = noise.depth_sigma * noise.radius / scale
        depth[valid] += sigma * rng.standard_normal(int(valid.sum()))
        depth[valid] = np.maximum(depth[valid], 1e-3)
    if noise.outlier_fraction > 0:
        idx = np.flatnonzero(valid)
        n_out = int(round(noise.outlier_fraction * idx.size))
        pick = rng.choice(idx, size=n_out, replace=False)
        flat = depth.ravel()
        flat[pick] = flat[pick] * rng.uniform(0.5, 2.0, n_out)
    if noise.hole_fraction > 0:
        depth[_blob_holes(valid, noise.hole_fraction, rng)] = np.nan
    return DepthMap(depth)


def _azimuth_deg(g: RigidPose) -> float:
    c = g.camera_center()
    return float(np.rad2deg(np.arctan2(c[1], c[0])))


def pose_outlier_frames(seq: Sequence, noise: NoiseConfig) -> np.ndarray:
    """Boolean mask of frames inside the failing azimuth arc.

    The arc is centred on ``pose_outlier_center_deg`` in the canonical frame
    and sized to cover ``pose_outlier_fraction`` of a full orbit.
    """
    if noise.pose_outlier_fraction <= 0:
        return np.zeros(len(seq), dtype=bool)
    half = 180.0 * noise.pose_outlier_fraction
    az = np.array([_azimuth_deg(f.gt_global_pose) for f in seq.frames])
    diff = (az - noise.pose_outlier_center_deg + 180.0) % 360.0 - 180.0
    return np.abs(diff) <= half


def simulate_sfm(seq: Sequence, noise_config: NoiseConfig = NoiseConfig(), seed: int = 0) -> Sequence:
    """Observed track: hide a rigid motion ``h`` and scale ``lam``, add depth noise.

    ``g_obs = g_gt * h^-1`` with translations (and depths) divided by ``lam``,
    so that ``g_gt = g_obs(lam) * h`` with ``g(lam) = (R, lam T)``.
    """
    rng = sequence_rng(seed, seq.id, 2)
    noise = noise_config
    if noise.random_alignment:
        extent = seq.shape.extent if seq.shape is not None else 1.0
        t_dir = rng.standard_normal(3)
        t_dir /= np.linalg.norm(t_dir)
        h = RigidPose(Rotation.random(rng), t_dir * 2.0 * extent * rng.uniform() ** (1 / 3))
    else:
        h = RigidPose.identity()
    if seq.modality == KF or not noise.random_scale:
        lam = 1.0
    else:
        lo, hi = noise.scale_range
        lam = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
    h_inv = h.inverse()
    outliers = pose_outlier_frames(seq, noise)
    frames = []
    for f, bad in zip(seq.frames, outliers):
        g = compose(f.gt_global_pose, h_inv)
        if bad:
            axis = rng.standard_normal(3)
            axis /= np.linalg.norm(axis)
            angle = np.deg2rad(noise.pose_outlier_angle_deg) * rng.uniform(0.5, 1.0)
            g = RigidPose(so3_exp(axis * angle) @ g.rotation, g.translation)
        g_obs = RigidPose(g.rotation, g.translation / lam)
        dm = DepthMap(f.depth.depth / lam)
        dm = corrupt_depth(dm, noise, lam, rng)
        frames.append(Frame(f.index, f.calibration, g_obs, f.gt_global_pose, dm, f.descriptor.copy()))
    return Sequence(seq.id, frames, h, lam, seq.modality, seq.shape)


# --------------------------------------------------------------------------
# whole datasets
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetConfig:
    n_sequences: int = 8
    image_size: int = 32
    modality: str = SFM
    category: CategoryConfig = CategoryConfig()
    orbit: OrbitConfig = OrbitConfig()
    noise: NoiseConfig = NoiseConfig()

    def validate(self):
        if self.n_sequences < 1:
            raise ConfigError("need at least one sequence")
        if self.image_size < DESCRIPTOR_GRID:
            raise ConfigError(f"image_size must be >= {DESCRIPTOR_GRID}")
        if self.modality not in (SFM, KF, "mixed"):
            raise ConfigError(f"unknown modality {self.modality!r}")
        if self.orbit.n_frames < 2:
            raise ConfigError("need at least two frames per sequence")


def _make_sequence(args):
    seed, i, shape, cfg = args
    modality = cfg.modality if cfg.modality != "mixed" else (KF if i % 2 else SFM)
    noise = replace(cfg.noise, radius=cfg.orbit.radius)
    gt = render_sequence(shape, cfg.orbit, default_calibration(cfg.image_size), seed, i, modality)
    return simulate_sfm(gt, noise, seed)


def make_dataset(seed: int, config: DatasetConfig = DatasetConfig(), workers: Optional[int] = None):
    """Render and reconstruct ``config.n_sequences`` sequences, one instance each.

    Every sequence draws from its own RNG stream, so the result does not
    depend on ``workers``.
    """
    config.validate()
    shapes = generate_category(seed, config.n_sequences, config.category)
    jobs = [(seed, i, shapes[i], config) for i in range(config.n_sequences)]
    workers = workers or worker_count()
    if workers <= 1:
        return [_make_sequence(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_make_sequence, jobs))


def fused_cloud(seq: Sequence, use_gt: bool = False, stride: int = 1) -> PointCloud:
    """Back-project every frame's depth into the sequence's world frame."""
    pts = []
    for f in seq.frames:
        g = f.gt_global_pose if use_gt else f.observed_pose
        dm = render_depth(seq.shape, g, f.calibration) if use_gt else f.depth
        pts.append(g.inverse().apply(backproject(dm, f.calibration, stride).points))
    return PointCloud(np.concatenate(pts))
