"""End-to-end glue: model checkpoints, the evaluation protocol and dataset augmentation.

The command-line front end is a thin layer over these functions.
"""

from __future__ import annotations

import csv
import io as _io
from dataclasses import asdict, dataclass, fields, is_dataclass
from typing import Optional

import numpy as np

from . import metrics
from .augment import PerturbationConfig, dibr_warp, hole_fraction, sample_perturbation, silhouette
from .completion import PointMlpParams, default_tau, laplacian_smooth, threshold_cloud
from .geometry import AlignmentError, DepthMap, PointCloud, adjust_pose, umeyama_align
from .learn.nn import ParamStore, load_checkpoint, save_checkpoint
from .learn.train import (Stage1Result, Stage2Result, TrainConfig, complete, frame_predictions, partial_cloud,
                          predict_poses)
from .synth import (SFM, CategoryConfig, ConfigError, DatasetConfig, NoiseConfig, OrbitConfig, Sequence)

EVAL_SCHEMA = "lookaround.eval/1"
AUGMENT_SCHEMA = "lookaround.augment/1"


# -- configuration round trips --------------------------------------------------


def dataset_config_to_json(cfg: DatasetConfig) -> dict:
    def conv(v):
        if is_dataclass(v):
            return {k: conv(x) for k, x in asdict(v).items()}
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        if isinstance(v, tuple):
            return list(v)
        return v

    return conv(cfg)


def _build(cls, obj: dict):
    names = {f.name: f for f in fields(cls)}
    unknown = set(obj) - set(names)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} options: {sorted(unknown)}")
    kw = {}
    for k, v in obj.items():
        default = getattr(cls(), k) if k in names else None
        kw[k] = tuple(v) if isinstance(default, tuple) and isinstance(v, list) else v
    return cls(**kw)


def dataset_config_from_json(obj: dict) -> DatasetConfig:
    obj = dict(obj)
    sub = {"category": CategoryConfig, "orbit": OrbitConfig, "noise": NoiseConfig}
    for key, cls in sub.items():
        if key in obj:
            obj[key] = _build(cls, obj[key])
    cfg = _build(DatasetConfig, obj)
    cfg.validate()
    return cfg


# -- checkpoints ------------------------------------------------------------------


@dataclass
class Model:
    stage1: Stage1Result
    stage2: Optional[Stage2Result] = None
    train_ids: tuple = ()

    @property
    def stage(self) -> str:
        return "all" if self.stage2 is not None else "1"


def save_model(path, model: Model) -> None:
    s1, s2 = model.stage1, model.stage2
    cfg = s1.config or TrainConfig()
    stores = {"vp": s1.vp, "depth": s1.depth, "norm": s1.norm}
    meta = {
        "stage": model.stage,
        "config": cfg.to_json(),
        "lambda_hat": {str(k): float(v) for k, v in s1.lambda_hat.items()},
        "train_ids": [int(i) for i in model.train_ids],
        "n_pixels": int(s1.n_pixels),
        "stage1_iterations": int(s1.iterations),
    }
    if s2 is not None:
        p = s2.params
        stores["pcl"] = p.store
        stores["pcl_mean"] = ParamStore({"mean_cloud": np.asarray(s2.mean_cloud)})
        meta["pcl"] = {"n_support": p.n_support, "n_desc": p.n_desc, "encoder": p.encoder,
                       "decoder": p.decoder, "sum_scale": p.sum_scale}
        meta["stage2_iterations"] = int(s2.iterations)
    save_checkpoint(path, stores, meta)


def load_model(path) -> Model:
    stores, meta = load_checkpoint(path)
    cfg = TrainConfig.from_json(meta["config"])
    lam = {int(k): float(v) for k, v in meta["lambda_hat"].items()}
    s1 = Stage1Result(stores["vp"], stores["depth"], lam, [], int(meta.get("stage1_iterations", 0)), cfg,
                      int(meta["n_pixels"]), stores["norm"])
    s2 = None
    if meta.get("stage") == "all":
        spec = meta["pcl"]
        params = PointMlpParams(stores["pcl"], int(spec["n_support"]), int(spec["n_desc"]), int(spec["encoder"]),
                                int(spec["decoder"]), float(spec["sum_scale"]))
        s2 = Stage2Result(params, [], int(meta.get("stage2_iterations", 0)), stores["pcl_mean"]["mean_cloud"])
    return Model(s1, s2, tuple(meta.get("train_ids", ())))


# -- evaluation -------------------------------------------------------------------


@dataclass(frozen=True)
class EvalConfig:
    tg_split: str = "train"  # fit T_G on the training sequences or on the evaluated ones
    ec_threshold: float = 0.6
    er_threshold: float = metrics.ROTATION_THRESHOLD
    shape: metrics.ShapeEvalConfig = metrics.ShapeEvalConfig()
    shape_stride: int = 6
    m_max: int = 512
    seed: int = 0
    allow_overlap: bool = False

    def validate(self):
        if self.tg_split not in ("train", "test"):
            raise ConfigError("tg_split must be 'train' or 'test'")
        if self.shape_stride < 1 or self.m_max < 1:
            raise ConfigError("shape_stride and m_max must be positive")
        if not (self.ec_threshold > 0 and self.er_threshold > 0):
            raise ConfigError("thresholds must be positive")
        return self


@dataclass
class Predictor:
    """Pose, depth and shape predictions for whole sequences."""

    model: Optional[Model] = None

    @property
    def oracle(self) -> bool:
        return self.model is None

    def poses(self, seq: Sequence):
        """``(poses, conf_R, conf_C)`` for every frame."""
        if self.oracle:
            ones = np.ones(len(seq))
            return [f.gt_global_pose for f in seq.frames], ones, ones
        s1 = self.model.stage1
        desc = np.stack([f.descriptor for f in seq.frames])
        poses, s_r, s_t = predict_poses(s1.vp, s1.norm, desc, (s1.config or TrainConfig()).hidden)
        return poses, 1.0 / s_r, 1.0 / s_t


def _centers(poses) -> np.ndarray:
    return np.stack([g.camera_center() for g in poses])


def fit_global_alignment(gt_poses: list, pred_poses: list):
    try:
        return umeyama_align(_centers(gt_poses), _centers(pred_poses))
    except AlignmentError as exc:
        raise ConfigError(f"cannot fit the global alignment: {exc}") from exc


def _shape_sample(seq: Sequence, j: int, seed: int) -> np.ndarray:
    pts = seq.shape.sample_surface(rng=np.random.default_rng([seed, 5, seq.id, j]))
    return seq.frames[j].gt_global_pose.apply(pts)


def _shape_scores(cam_points: np.ndarray, gt: np.ndarray, sfm: bool, cfg: metrics.ShapeEvalConfig):
    if len(cam_points) == 0:
        return 0.0, float("nan")
    pred = PointCloud(cam_points)
    if sfm:
        _, pred = metrics.scale_align(pred, gt)
    return metrics.voxel_iou(gt, pred, cfg), metrics.pcl_distance(gt, pred)


def evaluate_shapes(predictor: Predictor, sequences: list, cfg: EvalConfig) -> dict:
    """Mean VIoU and D_pcl of the completed clouds and of two baselines.

    Every cloud is compared in the camera frame of its test frame. The
    completion ``C^`` is placed with the predicted pose, thresholded at ``tau``
    (default ``0.5/M``) and optionally smoothed; the baselines are the partial
    cloud of the predicted depth and the average training cloud. For sfm-like
    sequences predictions are rescaled by ``zeta`` first.
    """
    scores = {"completion": [], "partial": [], "average": []}
    n_empty = 0
    s2 = None if predictor.oracle else predictor.model.stage2
    for seq in sequences:
        if seq.shape is None:
            raise ConfigError(f"sequence {seq.id} has no ground-truth shape")
        if predictor.oracle:
            poses, depths = [f.gt_global_pose for f in seq.frames], None
        else:
            poses, _, _, depths = frame_predictions(predictor.model.stage1, seq)
        sfm = seq.modality == SFM
        for j in range(0, len(seq), cfg.shape_stride):
            gt = _shape_sample(seq, j, cfg.seed)
            if predictor.oracle:
                scores["completion"].append(_shape_scores(gt, gt, False, cfg.shape))
                continue
            g = poses[j]
            pc = partial_cloud(seq.frames[j], g, depths[j])
            scores["partial"].append(_shape_scores(g.apply(pc.cloud.points), gt, sfm, cfg.shape))
            scores["average"].append(_shape_scores(g.apply(s2.mean_cloud), gt, sfm, cfg.shape))
            if len(pc.cloud) == 0:
                n_empty += 1
                scores["completion"].append((0.0, float("nan")))
                continue
            sc = complete(s2.params, pc, cfg.m_max, np.random.default_rng([cfg.seed, 6, seq.id, j]))
            tau = cfg.shape.tau if cfg.shape.tau is not None else default_tau(len(sc))
            c_hat = threshold_cloud(sc, tau)
            if cfg.shape.smooth and len(c_hat) > 8:
                c_hat = laplacian_smooth(c_hat)
            n_empty += len(c_hat) == 0
            scores["completion"].append(_shape_scores(g.apply(c_hat.points), gt, sfm, cfg.shape))

    def summary(rows):
        if not rows:
            return None
        a = np.array(rows, dtype=np.float64)
        d = a[:, 1][np.isfinite(a[:, 1])]
        return {"mVIoU": float(a[:, 0].mean()), "mD_pcl": float(d.mean()) if d.size else float("nan"),
                "n_clouds": int(len(a))}

    out = {k: summary(v) for k, v in scores.items()}
    out["n_empty"] = int(n_empty)
    return out


def evaluate(predictor: Predictor, sequences: list, eval_ids: list, fit_ids: list, cfg: EvalConfig,
             with_shapes: bool = True):
    """Run the full protocol. Returns ``(report, records, pairs)``.

    ``records`` and ``pairs`` hold the per-frame and per-pair errors behind
    the medians in the report.
    """
    cfg.validate()
    by_id = {s.id: s for s in sequences}
    missing = [i for i in list(eval_ids) + list(fit_ids) if i not in by_id]
    if missing:
        raise ConfigError(f"sequences {missing} are not in the dataset")
    if not eval_ids:
        raise ConfigError("no sequences to evaluate")
    preds = {i: predictor.poses(by_id[i]) for i in sorted(set(eval_ids) | set(fit_ids))}

    gt_fit = [f.gt_global_pose for i in fit_ids for f in by_id[i].frames]
    pr_fit = [g for i in fit_ids for g in preds[i][0]]
    t_g = fit_global_alignment(gt_fit, pr_fit)

    records, conf_c = [], []
    for i in eval_ids:
        poses, c_r, c_t = preds[i]
        for j, (f, g) in enumerate(zip(by_id[i].frames, poses)):
            records.append(metrics.PoseEvalRecord(f.gt_global_pose, adjust_pose(g, t_g), float(c_r[j]), i, j))
            conf_c.append(float(c_t[j]))
    abs_err = np.array([metrics.absolute_errors(r) for r in records])
    pair_rows = []
    for a, b in metrics.record_pairs(records):
        rel = metrics.relative_errors(records[a], records[b])
        if rel is not None:
            pair_rows.append((records[a].sequence_id, records[a].frame, records[b].frame, rel[0], rel[1]))
    med = metrics.median_report(records)
    report = {
        "schema": EVAL_SCHEMA,
        "medians": {
            "e_R": float(np.rad2deg(med["e_R"])),
            "e_C": med["e_C"],
            "e_R_rel": float(np.rad2deg(med["e_R_rel"])),
            "e_T_rel": med["e_T_rel"],
            "n_pairs": med["n_pairs"],
        },
        "AP_eR": metrics.average_precision(abs_err[:, 0], [r.confidence for r in records], cfg.er_threshold),
        "AP_eC": metrics.average_precision(abs_err[:, 1], conf_c, cfg.ec_threshold),
        "mVIoU": None,
        "mD_pcl": None,
        "n_records": len(records),
        "config": {
            "angle_units": "deg",
            "tg_split": cfg.tg_split,
            "eval_sequences": [int(i) for i in eval_ids],
            "fit_sequences": [int(i) for i in fit_ids],
            "er_threshold_deg": float(np.rad2deg(cfg.er_threshold)),
            "ec_threshold": cfg.ec_threshold,
            "voxel_resolution": cfg.shape.resolution,
            "viou_outside_points": "clipped",
            "zeta_alignment": "sfm sequences only",
            "tau": cfg.shape.tau if cfg.shape.tau is not None else "0.5/M",
            "smooth": cfg.shape.smooth,
            "shape_stride": cfg.shape_stride,
            "m_max": cfg.m_max,
            "seed": cfg.seed,
            "oracle": predictor.oracle,
        },
        "T_G": {"rotation": t_g.rotation.q.tolist(), "translation": t_g.translation.tolist(),
                "scale": float(t_g.scale)},
    }
    has_pcl = predictor.oracle or predictor.model.stage2 is not None
    if with_shapes and has_pcl:
        shapes = evaluate_shapes(predictor, [by_id[i] for i in eval_ids], cfg)
        report["mVIoU"] = shapes["completion"]["mVIoU"]
        report["mD_pcl"] = shapes["completion"]["mD_pcl"]
        report["shape_baselines"] = {"partial": shapes["partial"], "average": shapes["average"]}
        report["n_empty_clouds"] = shapes["n_empty"]
    rec_rows = [(r.sequence_id, r.frame, e[0], e[1], r.confidence, c) for r, e, c in zip(records, abs_err, conf_c)]
    return report, rec_rows, pair_rows


RECORD_COLUMNS = ["sequence", "frame", "e_R_deg", "e_C", "confidence_R", "confidence_C"]
PAIR_COLUMNS = ["sequence", "frame_a", "frame_b", "e_R_rel_deg", "e_T_rel"]


def records_csv(rows: list) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_COLUMNS)
    for s, f, e_r, e_c, c_r, c_c in rows:
        w.writerow([s, f, repr(float(np.rad2deg(e_r))), repr(float(e_c)), repr(float(c_r)), repr(float(c_c))])
    return buf.getvalue()


def pairs_csv(rows: list) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PAIR_COLUMNS)
    for s, a, b, e_r, e_t in rows:
        w.writerow([s, a, b, repr(float(np.rad2deg(e_r))), repr(float(e_t))])
    return buf.getvalue()


# -- augmentation -----------------------------------------------------------------


def observed_radius(seq: Sequence) -> float:
    """Mean distance of the observed camera centres from their centroid."""
    c = _centers([f.observed_pose for f in seq.frames])
    return float(np.linalg.norm(c - c.mean(axis=0), axis=1).mean())


def predicted_depth_maps(model: Model, seq: Sequence) -> list:
    """Predicted depth in the sequence's own units, restricted to the object silhouette."""
    _, _, _, depths = frame_predictions(model.stage1, seq)
    lam = model.stage1.lambda_hat.get(seq.id, 1.0)
    out = []
    for f, d in zip(seq.frames, depths):
        mask = silhouette(f.depth)
        out.append(DepthMap(np.where(mask, d.mean / lam, np.nan)))
    return out


def augment_sequences(sequences: list, per_frame: int, scale: float = 1.0, seed: int = 0,
                      depth_source: str = "gt", model: Optional[Model] = None):
    """``per_frame`` warped copies of every frame.

    Returns ``(sequences, sources, hole_fractions)`` where ``sources[i][k]`` is
    the source frame of frame ``k`` of output sequence ``i``.
    """
    if per_frame < 1:
        raise ConfigError("per_frame must be >= 1")
    if scale < 0:
        raise ConfigError("perturbation scale must be non-negative")
    if depth_source not in ("gt", "predicted"):
        raise ConfigError("depth_source must be 'gt' or 'predicted'")
    if depth_source == "predicted" and model is None:
        raise ConfigError("predicted depth needs a trained checkpoint")
    out, sources, holes = [], [], []
    for seq in sequences:
        pcfg = PerturbationConfig.for_radius(observed_radius(seq), seed).scaled(scale)
        src_depth = predicted_depth_maps(model, seq) if depth_source == "predicted" else [None] * len(seq)
        frames, src = [], []
        for j, f in enumerate(seq.frames):
            for k in range(per_frame):
                rng = np.random.default_rng([seed, 3, seq.id, j, k])
                delta = sample_perturbation(pcfg, rng)
                nf, _, dm = dibr_warp(f, src_depth[j], delta, gt_scale=seq.gt_scale)
                frames.append(type(nf)(len(frames), nf.calibration, nf.observed_pose, nf.gt_global_pose,
                                       nf.depth, nf.descriptor))
                src.append(j)
                holes.append(hole_fraction(dm))
        out.append(Sequence(seq.id, frames, seq.gt_alignment, seq.gt_scale, seq.modality, seq.shape, True))
        sources.append(src)
    return out, sources, holes


def hole_histogram(holes, bins: int = 10) -> dict:
    counts, edges = np.histogram(np.asarray(holes, dtype=np.float64), bins=bins, range=(0.0, 1.0))
    return {"edges": [float(e) for e in edges], "counts": [int(c) for c in counts],
            "mean": float(np.mean(holes)) if len(holes) else float("nan")}


__all__ = [
    "EvalConfig", "Model", "Predictor", "augment_sequences", "dataset_config_from_json", "dataset_config_to_json",
    "evaluate", "evaluate_shapes", "hole_histogram", "load_model", "pairs_csv", "records_csv", "save_model",
]
