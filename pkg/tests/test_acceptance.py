"""End-to-end acceptance checks, one test per criterion.

Each test logs a single ``[PASS]``/``[FAIL]`` line (see ``record_criterion``)
that is repeated in the terminal summary. The training-based checks are the
slow part of the suite, taking several minutes each on one core.
"""

import time

import numpy as np
import pytest

from conftest import random_pose, record_criterion
from gradcases import CASES, relative_gradient_error
from lookaround import metrics
from lookaround.augment import PerturbationConfig, dibr_warp, identity_delta, sample_perturbation
from lookaround.cli import EXIT_OK, main
from lookaround.completion import occupancy_targets
from lookaround.geometry import (DepthMap, PointCloud, RigidPose, Rotation, compose, inverse, relative_pose,
                                 so3_exp, so3_log)
from lookaround.learn.train import TrainConfig, train_stage1, train_stage2
from lookaround.pipeline import EvalConfig, Model, Predictor, evaluate, evaluate_shapes
from lookaround.synth import (DatasetConfig, Frame, NoiseConfig, OrbitConfig, default_calibration, depth_descriptor,
                              make_dataset)

# corrupted-pair experiment: the failing arc covers 10.56% of each orbit, so
# 1 - (1 - 0.1056)^2 = 20% of all frame pairs contain a corrupted pose
CORRUPT_FRACTION = 0.1056
ABLATION_SEEDS = (0, 1, 2, 3, 4)


def _rodrigues(omega):
    theta = np.linalg.norm(omega)
    if theta == 0:
        return np.eye(3)
    k = omega / theta
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * kx + (1 - np.cos(theta)) * kx @ kx


def test_lie_group_suite():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        w = rng.standard_normal(3)
        w *= rng.uniform(0, np.pi - 1e-3) / np.linalg.norm(w)
        r = so3_exp(w)
        worst = max(worst, np.abs(r.matrix() - _rodrigues(w)).max())
        worst = max(worst, np.abs(so3_log(r) - w).max())
        q = Rotation.random(rng)
        worst = max(worst, np.abs(so3_exp(so3_log(q)).matrix() - q.matrix()).max())
        a, b, h = random_pose(rng), random_pose(rng), random_pose(rng)
        rel = relative_pose(a, b).matrix()
        worst = max(worst, np.abs(rel - b.matrix() @ np.linalg.inv(a.matrix())).max())
        worst = max(worst, np.abs(relative_pose(compose(a, h), compose(b, h)).matrix() - rel).max())
        worst = max(worst, np.abs(compose(a, inverse(a)).matrix() - np.eye(4)).max())
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-9 and elapsed < 5.0
    record_criterion("lie-group suite", ok, f"max deviation {worst:.2e} over 10^3 cases in {elapsed:.2f} s")
    assert ok


def test_gradient_suite():
    t0 = time.perf_counter()
    failures, worst = [], {}
    for name, (case, tol) in CASES.items():
        errs = [relative_gradient_error(case, seed) for seed in range(20)]
        worst[name] = max(errs)
        if worst[name] >= tol:
            failures.append(name)
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 60.0
    summary = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record_criterion("gradient suite", ok, f"{len(CASES)} losses x 20 points in {elapsed:.1f} s; worst {summary}")
    assert ok, failures


def test_factorization_end_to_end():
    t0 = time.perf_counter()
    cfg = DatasetConfig(n_sequences=8, noise=NoiseConfig.off())
    seqs = make_dataset(0, cfg, workers=1)
    s1 = train_stage1(seqs, TrainConfig(iterations=10_000, seed=0))
    ids = [s.id for s in seqs]
    report, _, _ = evaluate(Predictor(Model(s1)), seqs, ids, ids, EvalConfig(tg_split="test"), with_shapes=False)
    elapsed = time.perf_counter() - t0
    m = report["medians"]
    radius = cfg.orbit.radius
    # lambda-hat is identified up to one factor shared by all sequences (the
    # canonical frame's scale); divide it out with the geometric mean ratio
    ratios = np.array([s1.lambda_hat[s.id] / s.gt_scale for s in seqs])
    lam_err = float(np.abs(ratios / np.exp(np.log(ratios).mean()) - 1.0).max())
    lam_err_tg = float(np.abs(report["T_G"]["scale"] * ratios - 1.0).max())
    ok = (m["e_R"] < 15.0 and m["e_C"] < 0.1 * radius and m["e_R_rel"] < 10.0 and m["e_T_rel"] < 0.25
          and lam_err < 0.05 and s1.iterations <= 10_000 and elapsed < 600)
    record_criterion("factorization end-to-end", ok,
                     f"e_R {m['e_R']:.2f} deg, e_C {m['e_C']:.3f} (radius {radius}), e_R_rel {m['e_R_rel']:.2f} deg, "
                     f"e_T_rel {m['e_T_rel']:.3f}, max lambda error {100 * lam_err:.2f}% "
                     f"({100 * lam_err_tg:.2f}% in the T_G scale gauge), "
                     f"{s1.iterations} iterations, {elapsed:.0f} s")
    assert ok


@pytest.fixture(scope="module")
def ablation_runs():
    """Probabilistic and plain stage-1 runs on the corrupted-pair data, per seed."""
    noise = NoiseConfig.off(pose_outlier_fraction=CORRUPT_FRACTION)
    runs = {}
    for seed in ABLATION_SEEDS:
        seqs = make_dataset(seed, DatasetConfig(noise=noise), workers=1)
        ids = [s.id for s in seqs]
        for prob in (True, False):
            s1 = train_stage1(seqs, TrainConfig(iterations=10_000, seed=seed, probabilistic=prob))
            rep, rec, _ = evaluate(Predictor(Model(s1)), seqs, ids, ids, EvalConfig(tg_split="test"),
                                   with_shapes=False)
            runs[seed, prob] = (rep, rec)
    return runs


def test_robustness_ablation(ablation_runs):
    wins, detail = 0, []
    for seed in ABLATION_SEEDS:
        p = ablation_runs[seed, True][0]["medians"]["e_R_rel"]
        q = ablation_runs[seed, False][0]["medians"]["e_R_rel"]
        wins += p < q
        detail.append(f"{p:.2f}/{q:.2f}")
    ok = wins == len(ABLATION_SEEDS)
    record_criterion("robustness ablation", ok,
                     f"{wins}/{len(ABLATION_SEEDS)} wins; median e_R_rel deg prob/plain per seed: {', '.join(detail)}")
    assert ok


def test_confidence_ap(ablation_runs):
    gaps = []
    for seed in ABLATION_SEEDS:
        rep, rec = ablation_runs[seed, True]
        err = np.array([r[2] for r in rec])
        conf = np.array([r[4] for r in rec])
        rng = np.random.default_rng([seed, 77])
        shuffled = np.mean([metrics.average_precision(err, rng.permutation(conf), metrics.ROTATION_THRESHOLD)
                            for _ in range(200)])
        gaps.append(rep["AP_eR"] - shuffled)
    ok = float(np.mean(gaps)) >= 0.1
    record_criterion("confidence AP", ok,
                     f"mean AP gap {np.mean(gaps):.3f} (per seed {', '.join(f'{g:.3f}' for g in gaps)}); need >= 0.1")
    assert ok


def test_completion_direction():
    t0 = time.perf_counter()
    seqs = make_dataset(0, DatasetConfig(n_sequences=12), workers=1)
    train, test = seqs[:8], seqs[8:]
    cfg = TrainConfig(iterations=3000, pcl_iterations=3000, w_pcl=50.0, w_delta=500.0, seed=0)
    s1 = train_stage1(train, cfg)
    s2 = train_stage2(train, s1, cfg)
    shapes = evaluate_shapes(Predictor(Model(s1, s2)), test, EvalConfig())
    elapsed = time.perf_counter() - t0

    rng = np.random.default_rng(5)
    support, gt = rng.standard_normal((1000, 3)), rng.standard_normal((1000, 3))
    nearest = np.argmin(((gt[:, None] - support[None]) ** 2).sum(-1), axis=1)
    oracle = np.bincount(nearest, minlength=1000) / 1000
    delta_exact = np.array_equal(occupancy_targets(support, gt), oracle)

    c, p, a = shapes["completion"], shapes["partial"], shapes["average"]
    ok = c["mVIoU"] > p["mVIoU"] and c["mD_pcl"] < a["mD_pcl"] and delta_exact and elapsed < 600
    record_criterion("completion direction", ok,
                     f"mVIoU {c['mVIoU']:.3f} vs partial {p['mVIoU']:.3f}; mD_pcl {c['mD_pcl']:.3f} vs average "
                     f"{a['mD_pcl']:.3f}; delta oracle exact at 10^3 points: {delta_exact}; {elapsed:.0f} s")
    assert ok


def test_metric_unit_values():
    devs = []
    for theta in (0.1, 0.7, 2.0, 3.0):
        g = RigidPose.identity()
        rec = metrics.PoseEvalRecord(g, RigidPose(so3_exp([0.0, theta, 0.0]), [0.0, 0.0, 0.0]))
        devs.append(abs(metrics.absolute_errors(rec)[0] - theta))
    devs.append(abs(metrics.pcl_distance(np.zeros((1, 3)), np.array([[1.0, 0.0, 0.0]])) - 2.0))
    cloud = np.random.default_rng(3).uniform(1, 2, (50, 3))
    devs.append(abs(metrics.scale_align(PointCloud(2 * cloud), cloud)[0] - 0.5))
    devs.append(abs(metrics.voxel_iou(cloud, cloud) - 1.0))
    worst = max(devs)
    ok = worst < 1e-9
    record_criterion("metric unit values", ok, f"max deviation {worst:.1e}")
    assert ok


def test_dibr_suite():
    t0 = time.perf_counter()
    cfg = DatasetConfig(n_sequences=2, orbit=OrbitConfig(n_frames=12),
                        noise=NoiseConfig.off(random_alignment=False, random_scale=False))
    seqs = make_dataset(0, cfg, workers=1)
    identity_equal = all(np.array_equal(dibr_warp(f, None, identity_delta())[2].depth, f.depth.depth, equal_nan=True)
                         for s in seqs for f in s.frames)

    k = default_calibration(32)
    plane = DepthMap(np.full((32, 32), 4.0))
    frame = Frame(0, k, RigidPose.identity(), RigidPose.identity(), plane, depth_descriptor(plane))
    plane_dev = 0.0
    for tau in (0.1, 0.5, 1.0):
        out = dibr_warp(frame, None, RigidPose(Rotation.identity(), [0.0, 0.0, -tau]))[2]
        plane_dev = max(plane_dev, np.abs(out.depth[out.valid()] - (4.0 - tau)).max())

    errs = []
    for s in seqs:
        extent = 2 * s.shape.extent
        for j, f in enumerate(s.frames):
            d = sample_perturbation(PerturbationConfig.for_radius(cfg.orbit.radius), [s.id, j])
            back = dibr_warp(dibr_warp(f, None, d)[0], None, d.inverse())[2]
            both = f.depth.valid() & back.valid()
            errs.append(np.abs(back.depth[both] - f.depth.depth[both]) / extent)
    errs = np.concatenate(errs)
    p99 = float(np.percentile(errs, 99))
    elapsed = time.perf_counter() - t0
    ok = identity_equal and plane_dev < 1e-6 and p99 < 0.02 and elapsed < 10.0
    record_criterion("DIBR suite", ok,
                     f"identity bit-equal {identity_equal}; plane deviation {plane_dev:.1e}; round trip p99 "
                     f"{100 * p99:.2f}% / median {100 * np.median(errs):.3f}% of extent "
                     f"({100 * np.mean(errs > 0.02):.2f}% of pixels above 2%); {elapsed:.1f} s")
    assert ok


def test_determinism(tmp_path, monkeypatch):
    gen = ["--sequences", "3", "--frames", "8", "--image-size", "16"]
    train = ["--iters", "100", "--pcl-iters", "10", "--hidden", "16", "--batch-size", "8", "--support-size", "32",
             "--pcl-encoder", "16", "--pcl-decoder", "16", "--leave-out-min", "8", "--leave-out-max", "32",
             "--gt-points", "128", "--holdout", "1"]
    outputs = []
    for name, threads in (("run1", "1"), ("run2", "1"), ("run3", "0"), ("run4", "4")):
        monkeypatch.setenv("LOOKAROUND_THREADS", threads)
        wd = tmp_path / name
        codes = [main(["generate", "--workdir", str(wd), "--seed", "11"] + gen),
                 main(["train", "--workdir", str(wd), "--seed", "11"] + train),
                 main(["eval", "--workdir", str(wd), "--seed", "11", "--csv", "records.csv"])]
        assert codes == [EXIT_OK] * 3
        outputs.append({str(p.relative_to(wd)): p.read_bytes() for p in sorted(wd.rglob("*"))
                        if p.is_file() and not p.name.endswith(("run_manifest.json", ".manifest.json"))})
    identical = all(o == outputs[0] for o in outputs[1:])
    ok = identical and len(outputs[0]) > 20
    record_criterion("determinism", ok,
                     f"{len(outputs[0])} files bit-identical across 2 runs and LOOKAROUND_THREADS 1/auto/4: {identical}")
    assert ok
