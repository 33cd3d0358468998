"""Command-line entry point: ``lookaround {generate,train,eval,augment}``.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O failure,
4 numerical failure. Every path is resolved against ``--workdir``. A JSON file
given with ``--config`` supplies option defaults; explicit flags win.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import __version__
from .dataset import read_dataset, write_dataset
from .io import FormatError, atomic_write_bytes, atomic_write_json
from .learn.nn import NumericalError
from .learn.train import TrainConfig, log_to_csv, pcl_log_to_csv, train_stage1, train_stage2
from .metrics import ShapeEvalConfig
from .pipeline import (AUGMENT_SCHEMA, EvalConfig, Model, Predictor, augment_sequences, dataset_config_to_json,
                       evaluate, hole_histogram, load_model, pairs_csv, records_csv, save_model)
from .synth import KF, SFM, ConfigError, DatasetConfig, NoiseConfig, OrbitConfig, make_dataset, worker_count

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
RUN_SCHEMA = "lookaround.run/1"
CHECKPOINT_NAME = "checkpoint.lkck"


class UsageError(Exception):
    pass


# -- helpers ------------------------------------------------------------------------


def _resolve(args, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else Path(args.workdir) / p


def _write_manifest(path: Path, args, config: dict, inputs: dict, outputs: dict, started: float) -> None:
    atomic_write_json(path, {
        "schema": RUN_SCHEMA,
        "command": args.command,
        "argv": list(args.argv),
        "config": config,
        "seed": args.seed,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "version": __version__,
        "workers": worker_count(),
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(started)),
        "wall_clock_s": time.time() - started,
    })


def _load_dataset(args, path):
    root = _resolve(args, path)
    if not (root / "dataset.json").exists():
        raise UsageError(f"no dataset at {root}")
    return read_dataset(root)


def _parse_ids(text):
    if text is None or text == "":
        return None
    try:
        return [int(x) for x in str(text).split(",") if x.strip() != ""]
    except ValueError as exc:
        raise UsageError(f"bad sequence list {text!r}") from exc


# -- generate -------------------------------------------------------------------------


def cmd_generate(args) -> int:
    started = time.time()
    if args.sequences < 1:
        raise UsageError("--sequences must be >= 1")
    if args.frames < 2:
        raise UsageError("--frames must be >= 2")
    noise = NoiseConfig() if not args.noise_free else NoiseConfig.off()
    noise = replace(noise, pose_outlier_fraction=args.pose_outlier_fraction,
                    pose_outlier_angle_deg=args.pose_outlier_angle)
    cfg = DatasetConfig(n_sequences=args.sequences, image_size=args.image_size, modality=args.modality,
                        orbit=OrbitConfig(n_frames=args.frames, radius=args.radius), noise=noise)
    cfg.validate()
    seqs = make_dataset(args.seed, cfg)
    out = _resolve(args, args.out)
    meta = {"seed": args.seed, "config": dataset_config_to_json(cfg)}
    write_dataset(out, seqs, meta)
    _write_manifest(out / "run_manifest.json", args, meta["config"], {}, {"dataset": out}, started)
    print(f"wrote {len(seqs)} sequences x {args.frames} frames to {out}")
    return EXIT_OK


# -- train ----------------------------------------------------------------------------


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig(
        lr=args.lr, momentum=args.momentum, batch_size=args.batch_size, iterations=args.iters,
        grad_clip=args.grad_clip if args.grad_clip > 0 else None, w_r=args.w_r, w_t=args.w_t, w_d=args.w_d,
        w_pcl=args.w_pcl, w_delta=args.w_delta, probabilistic=not args.no_prob, min_gap=args.min_gap,
        support_size=args.support_size, pcl_batch=args.pcl_batch, pcl_iterations=args.pcl_iters,
        leave_out_min=args.leave_out_min, leave_out_max=args.leave_out_max, seed=args.seed, hidden=args.hidden,
        pcl_encoder=args.pcl_encoder, pcl_decoder=args.pcl_decoder, gt_points=args.gt_points,
    )
    return cfg.validate()


def _split(seqs, holdout: int):
    ids = sorted(s.id for s in seqs)
    if holdout < 0 or holdout >= len(ids):
        raise UsageError(f"--holdout must be in [0, {len(ids) - 1}]")
    return ids[: len(ids) - holdout], ids[len(ids) - holdout:]


def cmd_train(args) -> int:
    started = time.time()
    seqs, meta = _load_dataset(args, args.data)
    cfg = _train_config(args)
    out = _resolve(args, args.out)
    ckpt = out / CHECKPOINT_NAME
    train_ids, _ = _split(seqs, args.holdout)
    train = [s for s in seqs if s.id in train_ids]
    outputs = {"checkpoint": ckpt}
    out.mkdir(parents=True, exist_ok=True)
    if args.stage in ("1", "all"):
        s1 = train_stage1(train, cfg)
        atomic_write_bytes(out / "train_log.csv", log_to_csv(s1.log).encode())
        model = Model(s1, None, tuple(train_ids))
        outputs["log"] = out / "train_log.csv"
        print(f"stage 1: {s1.iterations} iterations, final loss {s1.log[-1]['loss']:.6g}")
    else:
        if not ckpt.exists():
            raise UsageError(f"--stage 2 needs a stage-1 checkpoint at {ckpt}")
        model = load_model(ckpt)
        train = [s for s in seqs if s.id in model.train_ids] or train
    if args.stage in ("2", "all"):
        s2_cfg = replace(model.stage1.config, **{
            k: getattr(cfg, k) for k in ("w_pcl", "w_delta", "support_size", "pcl_batch", "pcl_iterations",
                                         "leave_out_min", "leave_out_max", "pcl_encoder", "pcl_decoder",
                                         "gt_points", "seed")})
        s2 = train_stage2(train, model.stage1, s2_cfg)
        atomic_write_bytes(out / "pcl_log.csv", pcl_log_to_csv(s2.log).encode())
        model = Model(model.stage1, s2, model.train_ids)
        outputs["pcl_log"] = out / "pcl_log.csv"
        print(f"stage 2: {s2.iterations} iterations, final loss {s2.log[-1]['loss']:.6g}")
    save_model(ckpt, model)
    _write_manifest(out / "run_manifest.json", args, {**cfg.to_json(), "stage": args.stage, "holdout": args.holdout},
                    {"dataset": _resolve(args, args.data)}, outputs, started)
    return EXIT_OK


# -- eval -------------------------------------------------------------------------------


def cmd_eval(args) -> int:
    started = time.time()
    seqs, meta = _load_dataset(args, args.data)
    all_ids = sorted(s.id for s in seqs)
    if args.oracle:
        predictor, train_ids = Predictor(None), []
    else:
        ckpt = _resolve(args, args.checkpoint)
        if not ckpt.exists():
            raise UsageError(f"no checkpoint at {ckpt}")
        model = load_model(ckpt)
        predictor, train_ids = Predictor(model), list(model.train_ids)
    eval_ids = _parse_ids(args.sequences)
    if eval_ids is None:
        eval_ids = [i for i in all_ids if i not in train_ids] or all_ids
    overlap = sorted(set(eval_ids) & set(train_ids))
    if overlap and not args.allow_overlap:
        raise UsageError(f"evaluation sequences {overlap} were used for training (pass --allow-overlap)")
    if args.tg_split == "train" and not args.oracle:
        fit_ids = [i for i in train_ids if i in all_ids]
        if not fit_ids:
            raise UsageError("--tg-split train needs the training sequences in the dataset")
    else:
        fit_ids = list(eval_ids)
    radius = meta.get("config", {}).get("orbit", {}).get("radius", 6.0)
    ec = args.ec_threshold if args.ec_threshold > 0 else 0.1 * radius
    cfg = EvalConfig(tg_split="test" if args.oracle else args.tg_split, ec_threshold=ec,
                     shape=ShapeEvalConfig(args.voxel_resolution, args.tau, args.smooth),
                     shape_stride=args.shape_stride, m_max=args.m_max, seed=args.seed,
                     allow_overlap=args.allow_overlap)
    report, records, pairs = evaluate(predictor, seqs, eval_ids, fit_ids, cfg, with_shapes=not args.no_shapes)
    report["config"]["checkpoint"] = None if args.oracle else str(args.checkpoint)
    out = _resolve(args, args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_json(out, report)
    outputs = {"report": out}
    if args.csv:
        csv_path = _resolve(args, args.csv)
        atomic_write_bytes(csv_path, records_csv(records).encode())
        pair_path = csv_path.with_name(csv_path.stem + "_pairs.csv")
        atomic_write_bytes(pair_path, pairs_csv(pairs).encode())
        outputs.update(records=csv_path, pairs=pair_path)
    _write_manifest(out.with_name(out.stem + ".manifest.json"), args, report["config"],
                    {"dataset": _resolve(args, args.data)}, outputs, started)
    m = report["medians"]
    print(f"e_R {m['e_R']:.3f} deg  e_C {m['e_C']:.4f}  e_R_rel {m['e_R_rel']:.3f} deg  e_T_rel {m['e_T_rel']:.4f}  "
          f"AP_eR {report['AP_eR']:.3f}  AP_eC {report['AP_eC']:.3f}")
    return EXIT_OK


# -- augment ----------------------------------------------------------------------------


def cmd_augment(args) -> int:
    started = time.time()
    seqs, meta = _load_dataset(args, args.data)
    model = None
    if args.depth_source == "predicted":
        if not args.checkpoint:
            raise UsageError("--depth-source predicted needs --checkpoint")
        ckpt = _resolve(args, args.checkpoint)
        if not ckpt.exists():
            raise UsageError(f"no checkpoint at {ckpt}")
        model = load_model(ckpt)
    out_seqs, sources, holes = augment_sequences(seqs, args.per_frame, args.perturb, args.seed,
                                                 args.depth_source, model)
    out = _resolve(args, args.out)
    new_meta = {**meta, "augmented": {"source": str(_resolve(args, args.data)), "per_frame": args.per_frame,
                                      "perturb": args.perturb, "depth_source": args.depth_source,
                                      "seed": args.seed}}
    write_dataset(out, out_seqs, new_meta, sources)
    report = {"schema": AUGMENT_SCHEMA, "n_frames_in": sum(len(s) for s in seqs),
              "n_frames_out": sum(len(s) for s in out_seqs), "hole_fraction": hole_histogram(holes),
              "config": new_meta["augmented"]}
    atomic_write_json(out / "augment_report.json", report)
    _write_manifest(out / "run_manifest.json", args, new_meta["augmented"], {"dataset": _resolve(args, args.data)},
                    {"dataset": out, "report": out / "augment_report.json"}, started)
    print(f"wrote {report['n_frames_out']} augmented frames to {out} "
          f"(mean hole fraction {report['hole_fraction']['mean']:.3f})")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lookaround", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workdir", default=".", help="directory all relative paths are resolved against")
    common.add_argument("--config", default=None, help="JSON file of option defaults (keys are flag names)")
    common.add_argument("--seed", type=int, default=0, help="random seed")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="render a synthetic multi-view dataset")
    g.add_argument("--out", default="data", help="output dataset directory")
    g.add_argument("--sequences", type=int, default=8, help="number of sequences (one instance each)")
    g.add_argument("--frames", type=int, default=36, help="frames per sequence")
    g.add_argument("--image-size", type=int, default=32, help="square image side in pixels")
    g.add_argument("--radius", type=float, default=6.0, help="camera orbit radius")
    g.add_argument("--modality", choices=[SFM, KF, "mixed"], default=SFM, help="reconstruction type")
    g.add_argument("--noise-free", action="store_true", help="disable depth noise, outliers and holes")
    g.add_argument("--pose-outlier-fraction", type=float, default=0.0,
                   help="fraction of the orbit whose reconstructed poses are corrupted")
    g.add_argument("--pose-outlier-angle", type=float, default=90.0,
                   help="largest rotation error (degrees) of a corrupted pose")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", parents=[common], help="train the viewpoint/depth and completion networks")
    d = TrainConfig()
    t.add_argument("--data", default="data", help="dataset directory")
    t.add_argument("--out", default="run", help="output directory for checkpoint, logs and manifest")
    t.add_argument("--stage", choices=["1", "2", "all"], default="all", help="training stage(s) to run")
    t.add_argument("--holdout", type=int, default=0, help="hold out the last N sequences for evaluation")
    t.add_argument("--iters", type=int, default=d.iterations, help="stage-1 iteration budget")
    t.add_argument("--pcl-iters", type=int, default=d.pcl_iterations, help="stage-2 iteration budget")
    t.add_argument("--lr", type=float, default=d.lr, help="initial learning rate")
    t.add_argument("--momentum", type=float, default=d.momentum, help="SGD momentum")
    t.add_argument("--batch-size", type=int, default=d.batch_size, help="frame pairs per stage-1 step")
    t.add_argument("--pcl-batch", type=int, default=d.pcl_batch, help="clouds per stage-2 step")
    t.add_argument("--grad-clip", type=float, default=d.grad_clip, help="global gradient-norm cap (0 disables)")
    t.add_argument("--no-prob", action="store_true", help="train on plain losses without confidences")
    t.add_argument("--min-gap", type=int, default=d.min_gap, help="smallest frame gap of a training pair")
    for name in ("w_r", "w_t", "w_d", "w_pcl", "w_delta"):
        t.add_argument("--" + name.replace("_", "-"), type=float, default=getattr(d, name), help=f"loss weight {name}")
    t.add_argument("--hidden", type=int, default=d.hidden, help="hidden width of the stage-1 networks")
    t.add_argument("--pcl-encoder", type=int, default=d.pcl_encoder, help="point-MLP encoder width")
    t.add_argument("--pcl-decoder", type=int, default=d.pcl_decoder, help="point-MLP decoder width")
    t.add_argument("--gt-points", type=int, default=d.gt_points, help="target points per training cloud")
    t.add_argument("--support-size", type=int, default=d.support_size, help="support points M")
    t.add_argument("--leave-out-min", type=int, default=d.leave_out_min, help="smallest leave-out sample")
    t.add_argument("--leave-out-max", type=int, default=d.leave_out_max, help="largest leave-out sample")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate poses and shapes, write a JSON report")
    e.add_argument("--data", default="data", help="dataset directory")
    e.add_argument("--checkpoint", default=f"run/{CHECKPOINT_NAME}", help="trained checkpoint")
    e.add_argument("--out", default="report.json", help="JSON report path")
    e.add_argument("--csv", default=None, help="optional per-record CSV path (pairs go to *_pairs.csv)")
    e.add_argument("--sequences", default=None, help="comma-separated sequence ids (default: held-out ones)")
    e.add_argument("--tg-split", choices=["train", "test"], default="train",
                   help="sequences the global alignment T_G is fitted on")
    e.add_argument("--allow-overlap", action="store_true", help="allow evaluating on training sequences")
    e.add_argument("--ec-threshold", type=float, default=0.0,
                   help="camera-centre threshold of AP_eC (0: 10%% of the orbit radius)")
    e.add_argument("--tau", type=float, default=None, help="occupancy threshold (default 0.5/M)")
    e.add_argument("--smooth", action="store_true", help="Laplacian-smooth completed clouds")
    e.add_argument("--voxel-resolution", type=int, default=30, help="voxels per axis for VIoU")
    e.add_argument("--shape-stride", type=int, default=6, help="evaluate shapes on every n-th frame")
    e.add_argument("--m-max", type=int, default=512, help="test-time leave-out size")
    e.add_argument("--no-shapes", action="store_true", help="skip shape metrics")
    e.add_argument("--oracle", action="store_true", help="feed ground truth back as the prediction")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("augment", parents=[common], help="synthesize perturbed views by depth-based warping")
    a.add_argument("--data", default="data", help="dataset directory")
    a.add_argument("--out", default="augmented", help="output dataset directory")
    a.add_argument("--per-frame", type=int, default=1, help="augmented samples per input frame")
    a.add_argument("--perturb", type=float, default=1.0, help="scale of the default perturbation (0: identity)")
    a.add_argument("--depth-source", choices=["gt", "predicted"], default="gt", help="depth map to warp")
    a.add_argument("--checkpoint", default=None, help="checkpoint for --depth-source predicted")
    a.set_defaults(func=cmd_augment)
    return p


def _apply_config_file(parser: argparse.ArgumentParser, argv: list):
    """Parse once to find the subcommand and config, then reparse with the file as defaults."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    path = _resolve(args, args.config)
    try:
        obj = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise UsageError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise UsageError("config file must hold a JSON object")
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in subparser._actions}
    defaults = {}
    for k, v in obj.items():
        dest = k.lstrip("-").replace("-", "_")
        if dest not in known or dest in ("config", "help"):
            raise UsageError(f"unknown option {k!r} in config file")
        defaults[dest] = v
    subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config_file(parser, argv)
        args.argv = argv
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
