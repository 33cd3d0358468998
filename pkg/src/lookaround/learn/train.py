"""Two-stage training: viewpoint + depth regressors, then the point-MLP.

Every random draw comes from a generator keyed on ``(seed, stage, iteration)``,
pairs are fixed before any computation, and reductions happen in a fixed
order, so a run is reproducible from its seed alone.
"""

from __future__ import annotations

import csv
import io as _io
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from .. import factorization as fz
from ..completion import (PointMlpParams, batch_loss_delta, batch_loss_pcl, leave_out, occupancy_targets,
                          remove_outliers,
                          point_mlp_apply, point_mlp_forward)
from ..depth import DepthPrediction, align_partial_cloud
from ..depth import SIGMA_FLOOR as DEPTH_SIGMA_FLOOR, batch_depth_nll
from ..geometry import PointCloud, RigidPose, Rotation
from ..synth import DESCRIPTOR_GRID, SFM, ConfigError, fused_cloud
from . import autodiff as ad
from . import lie
from .nn import MlpSpec, NumericalError, ParamStore, Plateau, check_finite, clip_by_global_norm, sgd_step


@dataclass
class TrainConfig:
    lr: float = 1e-2
    momentum: float = 0.0005
    batch_size: int = 64
    iterations: int = 10000
    plateau_window: int = 100
    plateau_patience: int = 300
    max_decays: int = 2
    grad_clip: Optional[float] = 5.0
    w_r: float = 1.0
    w_t: float = 1.0
    w_d: float = 1.0
    w_pcl: float = 1.0
    w_delta: float = 1.0
    probabilistic: bool = True
    min_gap: int = 1
    ema_decay: float = 0.99
    hidden: int = 128
    # stage 2
    support_size: int = 512
    pcl_encoder: int = 128
    pcl_decoder: int = 256
    pcl_batch: int = 4
    leave_out_min: int = 128
    leave_out_max: int = 512
    gt_points: int = 1024
    pcl_iterations: int = 2000
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.momentum < 0:
            raise ConfigError("momentum must be non-negative")
        if min(self.w_r, self.w_t, self.w_d, self.w_pcl, self.w_delta) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.batch_size < 1 or self.iterations < 1:
            raise ConfigError("batch_size and iterations must be positive")
        if self.support_size < 1 or self.leave_out_min < 1 or self.leave_out_min > self.leave_out_max:
            raise ConfigError("invalid completion sizes")
        if self.pcl_batch < 1 or self.pcl_iterations < 1 or self.gt_points < 1:
            raise ConfigError("pcl_batch, pcl_iterations and gt_points must be positive")
        return self

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        return cls(**obj).validate()


# -- stage-1 models ----------------------------------------------------------

VP_OUT = 8  # axis-angle (3), translation (3), raw sigma_R, raw sigma_T


def vp_spec(n_in: int, hidden: int) -> MlpSpec:
    return MlpSpec("vp", (n_in, hidden, hidden, VP_OUT))


def depth_spec(n_in: int, hidden: int, n_pixels: int) -> MlpSpec:
    return MlpSpec("depth", (n_in, hidden, hidden, 2 * n_pixels))


def init_stage1(n_in: int, n_pixels: int, cfg: TrainConfig, mean_depth: float):
    """Fresh viewpoint and depth parameters.

    The translation bias starts at ``(0, 0, mean_depth)`` so the object sits in
    front of every camera, and the depth bias starts at the mean depth.
    """
    rng = np.random.default_rng([cfg.seed, 0xB1A5])
    vp, dp = ParamStore(), ParamStore()
    vs = vp_spec(n_in, cfg.hidden)
    vs.init(vp, rng)
    last = len(vs.sizes) - 2
    vp.params[f"vp.w{last}"] *= 0.1
    b = vp.params[f"vp.b{last}"]
    b[5] = mean_depth
    b[6] = b[7] = np.log(np.expm1(0.5))  # softplus -> 0.5 per frame, 1 per pair
    ds = depth_spec(n_in, cfg.hidden, n_pixels)
    ds.init(dp, rng)
    dp.params[f"depth.w{len(ds.sizes) - 2}"] *= 0.1
    db = dp.params[f"depth.b{len(ds.sizes) - 2}"]
    db[:n_pixels] = mean_depth
    db[n_pixels:] = np.log(np.expm1(0.1 * mean_depth))
    return vp, dp


def vp_forward(p: dict, x, hidden: int):
    """Returns tensors ``(quaternion, translation, sigma_R, sigma_T)``."""
    out = vp_spec(x.shape[-1], hidden).apply(p, x)
    q = lie.exp_quat(out[:, 0:3])
    t = out[:, 3:6]
    return q, t, fz.sigma_from_raw(out[:, 6]), fz.sigma_from_raw(out[:, 7])


def depth_forward(p: dict, x, hidden: int, n_pixels: int):
    out = depth_spec(x.shape[-1], hidden, n_pixels).apply(p, x)
    return out[:, :n_pixels], ad.maximum(ad.softplus(out[:, n_pixels:]), DEPTH_SIGMA_FLOOR)


def input_normalizer(descriptors: np.ndarray) -> ParamStore:
    """Per-feature standardisation statistics of the training descriptors."""
    mu = descriptors.mean(axis=0)
    sd = descriptors.std(axis=0)
    return ParamStore({"mean": mu, "std": np.where(sd > 1e-6, sd, 1.0)})


def normalize_inputs(norm: ParamStore, x: np.ndarray) -> np.ndarray:
    return (x - norm["mean"]) / norm["std"]


# -- numpy helpers -------------------------------------------------------------


def _quat_mul(a, b):
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def _quat_rotate(q, v):
    w, u = q[..., :1], q[..., 1:]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def relative_arrays(q_a, t_a, q_b, t_b):
    conj = q_a * np.array([1.0, -1.0, -1.0, -1.0])
    q_rel = _quat_mul(q_b, conj)
    return q_rel, t_b - _quat_rotate(q_rel, t_a)


@dataclass
class SequenceArrays:
    """Dense per-frame arrays for a list of sequences with equal image size."""

    descriptors: np.ndarray  # (S, N, D)
    quats: np.ndarray  # (S, N, 4) observed
    trans: np.ndarray  # (S, N, 3) observed
    depth: np.ndarray  # (S, N, P), zero where invalid
    valid: np.ndarray  # (S, N, P)
    sfm: np.ndarray  # (S,) bool
    ids: list
    n_frames: np.ndarray  # (S,)

    @classmethod
    def build(cls, sequences: list) -> "SequenceArrays":
        if len(sequences) < 1:
            raise ConfigError("no sequences to train on")
        n_max = max(len(s) for s in sequences)
        f0 = sequences[0].frames[0]
        d, p = f0.descriptor.size, f0.depth.depth.size
        s_n = len(sequences)
        desc = np.zeros((s_n, n_max, d))
        quats = np.tile(np.array([1.0, 0, 0, 0]), (s_n, n_max, 1))
        trans = np.zeros((s_n, n_max, 3))
        depth = np.zeros((s_n, n_max, p))
        valid = np.zeros((s_n, n_max, p), dtype=bool)
        for i, seq in enumerate(sequences):
            for j, f in enumerate(seq.frames):
                if f.descriptor.size != d or f.depth.depth.size != p:
                    raise ConfigError("all frames must share descriptor length and image size")
                desc[i, j] = f.descriptor
                quats[i, j] = f.observed_pose.rotation.q
                trans[i, j] = f.observed_pose.translation
                ok = f.depth.valid().ravel()
                valid[i, j] = ok
                depth[i, j] = np.where(ok, f.depth.depth.ravel(), 0.0)
        return cls(desc, quats, trans, depth, valid,
                   np.array([s.modality == SFM for s in sequences]),
                   [s.id for s in sequences], np.array([len(s) for s in sequences]))


def _draw_pairs(arrs: SequenceArrays, batch: int, min_gap: int, rng: np.random.Generator):
    """Sequence indices and frame pairs, resampling pairs with a degenerate baseline."""
    seqs = rng.integers(len(arrs.ids), size=batch)
    pairs = np.zeros((batch, 2), dtype=np.int64)
    todo = np.arange(batch)
    for _ in range(100):
        for k in todo:
            pairs[k] = fz.sample_pairs(int(arrs.n_frames[seqs[k]]), 1, min_gap, rng)[0]
        s, a, b = seqs[todo], pairs[todo, 0], pairs[todo, 1]
        _, t_rel = relative_arrays(arrs.quats[s, a], arrs.trans[s, a], arrs.quats[s, b], arrs.trans[s, b])
        todo = todo[np.linalg.norm(t_rel, axis=-1) <= fz.BASELINE_EPS]
        if todo.size == 0:
            return seqs, pairs
    raise ConfigError(f"sequence {arrs.ids[seqs[todo[0]]]} has no pair with a usable baseline")


LOG_COLUMNS = ["iter", "loss", "l_r", "l_t", "L_R", "L_T", "depth", "lr", "grad_norm"]


@dataclass
class Stage1Result:
    vp: ParamStore
    depth: ParamStore
    lambda_hat: dict
    log: list = field(default_factory=list)
    iterations: int = 0
    config: Optional[TrainConfig] = None
    n_pixels: int = 0
    norm: Optional[ParamStore] = None


def train_stage1(sequences: list, cfg: TrainConfig = TrainConfig(), init=None, callback=None) -> Stage1Result:
    """Jointly fit the viewpoint and depth regressors on Siamese frame pairs."""
    cfg.validate()
    if len(sequences) < 2:
        raise ConfigError("stage 1 needs at least two sequences")
    arrs = SequenceArrays.build(sequences)
    n_in, n_pix = arrs.descriptors.shape[-1], arrs.depth.shape[-1]
    mean_depth = float(arrs.depth[arrs.valid].mean())
    vp, dp = init if init is not None else init_stage1(n_in, n_pix, cfg, mean_depth)
    norm = input_normalizer(arrs.descriptors.reshape(-1, n_in))
    scales = [fz.ScaleEstimate(i, 1.0, cfg.ema_decay) for i in arrs.ids]
    plateau = Plateau(cfg.lr, cfg.plateau_window, cfg.plateau_patience, cfg.max_decays)
    log = []
    it = 0
    for it in range(cfg.iterations):
        rng = np.random.default_rng([cfg.seed, 1, it])
        seqs, pairs = _draw_pairs(arrs, cfg.batch_size, cfg.min_gap, rng)
        a, b = pairs[:, 0], pairs[:, 1]
        q_rel_obs, t_rel_obs = relative_arrays(arrs.quats[seqs, a], arrs.trans[seqs, a],
                                               arrs.quats[seqs, b], arrs.trans[seqs, b])
        norm_mask = arrs.sfm[seqs]
        frames_s = np.concatenate([seqs, seqs])
        frames_t = np.concatenate([a, b])
        x = normalize_inputs(norm, arrs.descriptors[frames_s, frames_t])
        inv_lam = np.array([1.0 / scales[s].lambda_hat for s in frames_s])[:, None]
        gt_d = arrs.depth[frames_s, frames_t]
        ok = arrs.valid[frames_s, frames_t]
        n_valid = np.maximum(ok.sum(axis=1), 1)
        bsz = cfg.batch_size
        stats = {}

        def loss_fn(p):
            q, t, s_r, s_t = vp_forward(p, x, cfg.hidden)
            l_r, l_t = fz.batch_losses(q[:bsz], t[:bsz], q[bsz:], t[bsz:], q_rel_obs, t_rel_obs, norm_mask)
            if cfg.probabilistic:
                big_r, big_t = fz.batch_nll(l_r, l_t, s_r[:bsz] + s_r[bsz:], s_t[:bsz] + s_t[bsz:])
                pose_loss = ad.mean(big_r * cfg.w_r + big_t * cfg.w_t)
                stats["L_R"], stats["L_T"] = float(big_r.data.mean()), float(big_t.data.mean())
            else:
                pose_loss = ad.mean(l_r * cfg.w_r + l_t * cfg.w_t)
                stats["L_R"] = stats["L_T"] = float("nan")
            stats["l_r"], stats["l_t"] = float(l_r.data.mean()), float(l_t.data.mean())
            stats["t_hat"] = (t.data[:bsz], t.data[bsz:], q.data[:bsz], q.data[bsz:])
            total = pose_loss
            if cfg.w_d > 0:
                mean, sig = depth_forward(p, x, cfg.hidden, n_pix)
                per_frame = batch_depth_nll(mean, sig, gt_d, ok, inv_lam) / n_valid
                d_loss = ad.mean(per_frame)
                stats["depth"] = float(d_loss.data)
                total = total + d_loss * cfg.w_d
            else:
                stats["depth"] = 0.0
            return total

        params = {**vp.params, **dp.params}
        value, grads = ad.grad(loss_fn, params)
        if not np.isfinite(value):
            raise NumericalError(f"stage-1 loss became non-finite at iteration {it}")
        gnorm = clip_by_global_norm(grads, cfg.grad_clip)
        sgd_step(vp, {k: grads[k] for k in vp}, plateau.lr, cfg.momentum)
        sgd_step(dp, {k: grads[k] for k in dp}, plateau.lr, cfg.momentum)

        t_a, t_b, q_a, q_b = stats.pop("t_hat")
        _, t_rel_hat = relative_arrays(q_a, t_a, q_b, t_b)
        ratios = np.linalg.norm(t_rel_hat, axis=1) / np.linalg.norm(t_rel_obs, axis=1)
        for k, s in enumerate(seqs):
            if arrs.sfm[s] and ratios[k] > 0:
                scales[s] = fz.ema_scale(scales[s], ratios[k])

        row = {"iter": it, "loss": value, **stats, "lr": plateau.lr, "grad_norm": gnorm}
        row.update({f"lambda_{i}": scales[j].lambda_hat for j, i in enumerate(arrs.ids)})
        log.append(row)
        if callback is not None:
            callback(row)
        if plateau.update(value):
            break
    for store in (vp, dp):
        for k, v in store.items():
            check_finite(k, v)
    return Stage1Result(vp, dp, {i: scales[j].lambda_hat for j, i in enumerate(arrs.ids)},
                        log, it + 1, cfg, n_pix, norm)


def predict_poses(vp: ParamStore, norm: ParamStore, descriptors: np.ndarray, hidden: int):
    """Absolute poses and confidence scales for a stack of descriptors."""
    p = {k: ad.Tensor(v) for k, v in vp.items()}
    x = normalize_inputs(norm, np.atleast_2d(descriptors))
    q, t, s_r, s_t = vp_forward(p, ad.Tensor(x), hidden)
    poses = [RigidPose(Rotation(qi), ti) for qi, ti in zip(q.data, t.data)]
    return poses, s_r.data.copy(), s_t.data.copy()


def predict_depth(dp: ParamStore, norm: ParamStore, descriptors: np.ndarray, hidden: int, shape: tuple):
    """Canonical-unit depth means and Laplace scales, one ``shape`` map per descriptor."""
    n_pix = int(np.prod(shape))
    p = {k: ad.Tensor(v) for k, v in dp.items()}
    x = normalize_inputs(norm, np.atleast_2d(descriptors))
    mean, sig = depth_forward(p, ad.Tensor(x), hidden, n_pix)
    return mean.data.reshape(-1, *shape), sig.data.reshape(-1, *shape)


def _rows_to_csv(rows: list, columns: list) -> str:
    extra = sorted((k for k in rows[0] if k not in columns), key=lambda k: (len(k), k)) if rows else []
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns + extra)
    for r in rows:
        w.writerow([repr(float(r[c])) if c != "iter" else int(r[c]) for c in columns + extra])
    return buf.getvalue()


def log_to_csv(rows: list) -> str:
    """Stage-1 log as CSV text; columns are the fixed ones then ``lambda_<id>``."""
    return _rows_to_csv(rows, LOG_COLUMNS)


# -- stage 2 -------------------------------------------------------------------

PCL_LOG_COLUMNS = ["iter", "loss", "l_pcl", "l_delta", "lr", "grad_norm"]


@dataclass
class PartialCloud:
    """Globally aligned partial cloud of one frame with per-point features."""

    cloud: PointCloud
    features: np.ndarray  # (N, 1) descriptor value of each point's cell

    def subset(self, idx) -> "PartialCloud":
        return PartialCloud(self.cloud.subset(idx), self.features[idx])


def pixel_descriptors(descriptor: np.ndarray, pixels: np.ndarray, width: int, height: int,
                      grid: int = DESCRIPTOR_GRID) -> np.ndarray:
    """Descriptor cell value under each ``(u, v)`` pixel, as an ``(N, 1)`` array."""
    rows = (np.arange(grid + 1) * height) // grid
    cols = (np.arange(grid + 1) * width) // grid
    i = np.searchsorted(rows, pixels[:, 1], side="right") - 1
    j = np.searchsorted(cols, pixels[:, 0], side="right") - 1
    return np.asarray(descriptor).reshape(grid, grid)[i, j][:, None]


def frame_predictions(stage1: Stage1Result, seq) -> tuple:
    """Predicted poses, pose confidences and depth maps for every frame of ``seq``."""
    cfg = stage1.config or TrainConfig()
    desc = np.stack([f.descriptor for f in seq.frames])
    poses, s_r, s_t = predict_poses(stage1.vp, stage1.norm, desc, cfg.hidden)
    shape = seq.frames[0].depth.depth.shape
    mean, sig = predict_depth(stage1.depth, stage1.norm, desc, cfg.hidden, shape)
    return poses, s_r, s_t, [DepthPrediction(m, s) for m, s in zip(mean, sig)]


def partial_cloud(frame, pose: RigidPose, depth: DepthPrediction) -> PartialCloud:
    """Back-project the predicted depth inside the frame's object mask into the canonical frame.

    The mask is the set of pixels where the frame carries an observed depth.
    """
    mask = frame.depth.valid()
    pred = DepthPrediction(np.where(mask, depth.mean, np.nan), depth.sigma)
    k = frame.calibration
    cloud = align_partial_cloud(pred, k, pose)
    v, u = np.nonzero(mask & np.isfinite(pred.mean) & (pred.mean > 0))
    pixels = np.stack([u, v], axis=-1)
    return PartialCloud(cloud, pixel_descriptors(frame.descriptor, pixels, k.width, k.height))


def training_targets(seq, poses: list, lambda_hat: float, n_points: int, seed: int) -> list:
    """Per-frame ground-truth clouds in the canonical frame.

    The sequence's fused observed cloud is moved into each camera, rescaled by
    ``lambda_hat`` to canonical units and mapped out with that frame's
    predicted pose. Isolated points (depth outliers) are dropped first.
    """
    world = fused_cloud(seq).points
    world = world[remove_outliers(world)]
    rng = np.random.default_rng([seed, 2, 0xC0, seq.id])
    if len(world) > n_points:
        world = world[rng.choice(len(world), n_points, replace=False)]
    out = []
    for f, g_hat in zip(seq.frames, poses):
        cam = f.observed_pose.apply(world) * lambda_hat
        out.append(g_hat.inverse().apply(cam))
    return out


@dataclass
class Stage2Result:
    params: PointMlpParams
    log: list = field(default_factory=list)
    iterations: int = 0
    mean_cloud: Optional[np.ndarray] = None


def _stage2_data(sequences: list, stage1: Stage1Result, cfg: TrainConfig):
    inputs, targets = [], []
    for seq in sequences:
        poses, _, _, depths = frame_predictions(stage1, seq)
        lam = stage1.lambda_hat.get(seq.id, 1.0)
        tg = training_targets(seq, poses, lam, cfg.gt_points, cfg.seed)
        for f, g, d, c in zip(seq.frames, poses, depths, tg):
            pc = partial_cloud(f, g, d)
            if len(pc.cloud) > 0:
                inputs.append(pc)
                targets.append(c)
    if not inputs:
        raise ConfigError("no frame yields a non-empty partial cloud")
    return inputs, targets


def average_cloud(targets: list, m: int, seed: int) -> np.ndarray:
    """``m`` points drawn at random from the union of the training clouds."""
    pool = np.concatenate(targets)
    rng = np.random.default_rng([seed, 2, 0xA5])
    return pool[rng.choice(len(pool), m, replace=len(pool) < m)]


def train_stage2(sequences: list, stage1: Stage1Result, cfg: TrainConfig = TrainConfig(),
                 callback=None) -> Stage2Result:
    """Fit the completion network on frozen stage-1 predictions."""
    cfg.validate()
    if stage1.norm is None:
        raise ConfigError("stage 2 needs a trained stage-1 model")
    inputs, targets = _stage2_data(sequences, stage1, cfg)
    mean_cloud = average_cloud(targets, cfg.support_size, cfg.seed)
    params = PointMlpParams.init(cfg.support_size, mean_cloud, 1, cfg.pcl_encoder, cfg.pcl_decoder,
                                 seed=[cfg.seed, 2, 0xB1A5], sum_scale=1.0 / cfg.leave_out_max)
    store = params.store
    plateau = Plateau(cfg.lr, cfg.plateau_window, cfg.plateau_patience, cfg.max_decays)
    log = []
    it = 0
    for it in range(cfg.pcl_iterations):
        rng = np.random.default_rng([cfg.seed, 2, it])
        picks = rng.integers(len(inputs), size=cfg.pcl_batch)
        batch = []
        for k in picks:
            sub, idx = leave_out(inputs[k].cloud, cfg.leave_out_min, cfg.leave_out_max, rng, return_index=True)
            x = np.concatenate([sub.points, inputs[k].features[idx]], axis=1)
            batch.append((x, targets[k]))
        stats = {}

        def loss_fn(p):
            l_pcl, l_delta = [], []
            for x, c in batch:
                pts, masses = point_mlp_apply(p, params, ad.Tensor(x))
                l_pcl.append(batch_loss_pcl(pts, c))
                l_delta.append(batch_loss_delta(masses, occupancy_targets(pts.data, c)))
            lp, ld = ad.mean(ad.stack(l_pcl)), ad.mean(ad.stack(l_delta))
            stats["l_pcl"], stats["l_delta"] = float(lp.data), float(ld.data)
            return lp * cfg.w_pcl + ld * cfg.w_delta

        value, grads = ad.grad(loss_fn, dict(store.params))
        if not np.isfinite(value):
            raise NumericalError(f"stage-2 loss became non-finite at iteration {it}")
        gnorm = clip_by_global_norm(grads, cfg.grad_clip)
        sgd_step(store, grads, plateau.lr, cfg.momentum)
        row = {"iter": it, "loss": value, **stats, "lr": plateau.lr, "grad_norm": gnorm}
        log.append(row)
        if callback is not None:
            callback(row)
        if plateau.update(value):
            break
    for k, v in store.items():
        check_finite(k, v)
    return Stage2Result(params, log, it + 1, mean_cloud)


def complete(params: PointMlpParams, partial: PartialCloud, m_max: int, seed=0):
    """Test-time completion: confidence-weighted ``m_max`` subsample, then the point-MLP."""
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    sub, idx = leave_out(partial.cloud, 1, m_max, rng, test_time=True, return_index=True)
    return point_mlp_forward(sub, partial.features[idx], params)


def pcl_log_to_csv(rows: list) -> str:
    """Stage-2 log as CSV text."""
    return _rows_to_csv(rows, PCL_LOG_COLUMNS)
