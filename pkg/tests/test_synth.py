import numpy as np
import pytest

from lookaround.geometry import RigidPose, backproject, compose, relative_pose, rotation_angle_matrix
from lookaround.synth import (KF, SFM, CategoryConfig, ConfigError, DatasetConfig, InstanceShape, NoiseConfig,
                              OrbitConfig, Sequence, Superellipsoid, default_calibration,
                              generate_category, make_dataset, render_depth, render_sequence, simulate_sfm)


def _sphere(r=1.0):
    return InstanceShape(Superellipsoid(r, r, r, 1.0, 1.0), None)


STILL = OrbitConfig(n_frames=6, elevation_jitter_deg=0.0, azimuth_jitter_deg=0.0, random_start=False)


class TestCategory:
    def test_deterministic(self):
        a = generate_category(7, 5)
        b = generate_category(7, 5)
        assert [s.to_json() for s in a] == [s.to_json() for s in b]
        assert [s.to_json() for s in generate_category(8, 5)] != [s.to_json() for s in a]

    def test_within_ranges(self):
        cfg = CategoryConfig()
        for s in generate_category(0, 50, cfg):
            assert cfg.length[0] <= s.body.a <= cfg.length[1]
            assert cfg.width[0] <= s.body.b <= cfg.width[1]
            assert cfg.height[0] <= s.body.c <= cfg.height[1]
            assert cfg.e1[0] <= s.body.e1 <= cfg.e1[1]

    def test_collapsed_ranges_give_identical_instances(self):
        cfg = CategoryConfig(**{k: (v[0], v[0]) for k, v in CategoryConfig().ranges().items()})
        shapes = generate_category(3, 4, cfg)
        assert all(s.to_json() == shapes[0].to_json() for s in shapes)

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            generate_category(0, 0)
        with pytest.raises(ConfigError):
            generate_category(0, 2, CategoryConfig(length=(2.0, 1.0)))

    def test_surface_samples_lie_on_surface(self):
        shape = generate_category(1, 1)[0]
        pts = shape.sample_surface(2000, np.random.default_rng(0))
        assert pts.shape == (2000, 3)
        np.testing.assert_allclose(shape.inside_outside(pts), 1.0, atol=1e-6)


class TestRendering:
    def test_sphere_center_depth(self):
        # odd size puts the principal point on a pixel centre
        k = default_calibration(33)
        orbit = OrbitConfig(n_frames=2, radius=5.0, elevation_deg=0.0, elevation_jitter_deg=0.0,
                            azimuth_jitter_deg=0.0, random_start=False)
        seq = render_sequence(_sphere(), orbit, k, seed=0)
        for f in seq.frames:
            assert f.depth.depth[16, 16] == pytest.approx(4.0, abs=1e-9)
            assert not f.depth.valid()[0, 0]

    def test_sphere_depth_profile(self):
        # ray-sphere intersection in closed form for every pixel
        k = default_calibration(17)
        orbit = OrbitConfig(n_frames=2, radius=4.0, elevation_deg=0.0, elevation_jitter_deg=0.0,
                            azimuth_jitter_deg=0.0, random_start=False)
        seq = render_sequence(_sphere(), orbit, k, seed=0)
        v, u = np.mgrid[0:17, 0:17]
        x, y = (u - k.cx) / k.fx, (v - k.cy) / k.fy
        a = x ** 2 + y ** 2 + 1
        disc = 16.0 - a * 15.0
        z = np.where(disc >= 0, (4.0 - np.sqrt(np.maximum(disc, 0))) / a, np.nan)
        got = seq.frames[0].depth.depth
        np.testing.assert_array_equal(np.isfinite(got), np.isfinite(z))
        np.testing.assert_allclose(got[np.isfinite(z)], z[np.isfinite(z)], atol=1e-9)

    def test_antipodal_frames(self):
        orbit = OrbitConfig(n_frames=2, elevation_deg=0.0, elevation_jitter_deg=0.0, azimuth_jitter_deg=0.0,
                            random_start=False)
        seq = render_sequence(_sphere(), orbit, default_calibration(16), seed=0)
        rel = relative_pose(seq.frames[0].gt_global_pose, seq.frames[1].gt_global_pose)
        assert rotation_angle_matrix(rel.rotation.matrix()) == pytest.approx(np.pi, abs=1e-6)

    def test_orbit_centers(self):
        seq = render_sequence(_sphere(), STILL, default_calibration(16), seed=0)
        for f in seq.frames:
            c = f.gt_global_pose.camera_center()
            assert np.linalg.norm(c) == pytest.approx(STILL.radius, abs=1e-12)
            assert np.rad2deg(np.arcsin(c[2] / STILL.radius)) == pytest.approx(STILL.elevation_deg, abs=1e-9)

    def test_zero_jitter_reproducible(self):
        a = render_sequence(_sphere(), STILL, default_calibration(16), seed=4)
        b = render_sequence(_sphere(), STILL, default_calibration(16), seed=9)
        for fa, fb in zip(a.frames, b.frames):
            np.testing.assert_array_equal(fa.gt_global_pose.matrix(), fb.gt_global_pose.matrix())
            np.testing.assert_array_equal(fa.depth.depth, fb.depth.depth)

    def test_camera_inside_object(self):
        with pytest.raises(ConfigError):
            render_sequence(_sphere(7.0), OrbitConfig(), default_calibration(16), seed=0)

    def test_backprojected_pixels_lie_on_surface(self):
        shape = generate_category(2, 1)[0]
        k = default_calibration(32)
        seq = render_sequence(shape, OrbitConfig(n_frames=8), k, seed=1)
        for f in seq.frames:
            pts = f.gt_global_pose.inverse().apply(backproject(f.depth, k).points)
            assert len(pts) > 50
            np.testing.assert_allclose(shape.inside_outside(pts), 1.0, atol=1e-6)

    def test_reprojection_consistency(self):
        # points of frame 0 that frame 1 sees land on frame 1's depth within 2 px
        shape = generate_category(2, 1)[0]
        k = default_calibration(32)
        seq = render_sequence(shape, OrbitConfig(n_frames=36), k, seed=1)
        f0, f1 = seq.frames[0], seq.frames[1]
        pts = f0.gt_global_pose.inverse().apply(backproject(f0.depth, k).points)
        cam = f1.gt_global_pose.apply(pts)
        uv = np.stack([k.fx * cam[:, 0] / cam[:, 2] + k.cx, k.fy * cam[:, 1] / cam[:, 2] + k.cy], axis=1)
        other, pix = backproject(f1.depth, k, return_pixels=True)
        world1 = f1.gt_global_pose.inverse().apply(other.points)
        # nearest frame-1 surface point in 3-D, then compare image positions
        d = np.linalg.norm(pts[:, None] - world1[None], axis=-1)
        j = d.argmin(1)
        # one pixel spans depth / f, about 0.15 at the orbit radius
        close = d[np.arange(len(pts)), j] < 6.0 / k.fx
        assert close.mean() > 0.5
        np.testing.assert_array_less(np.linalg.norm(uv[close] - pix[j[close]], axis=1), 2.0)


class TestSimulateSfm:
    def test_noise_off_is_identity(self):
        gt = render_sequence(_sphere(), STILL, default_calibration(16), seed=0)
        obs = simulate_sfm(gt, NoiseConfig.off(random_alignment=False, random_scale=False), seed=0)
        assert obs.gt_scale == 1.0
        for a, b in zip(gt.frames, obs.frames):
            np.testing.assert_array_equal(a.observed_pose.matrix(), b.observed_pose.matrix())
            np.testing.assert_array_equal(a.depth.depth, b.depth.depth)

    def test_relative_rotation_invariant(self, toy_sequences):
        for seq in toy_sequences:
            for a, b in zip(seq.frames[:-1], seq.frames[1:]):
                obs = relative_pose(a.observed_pose, b.observed_pose)
                gt = relative_pose(a.gt_global_pose, b.gt_global_pose)
                np.testing.assert_allclose(obs.rotation.matrix(), gt.rotation.matrix(), atol=1e-12)

    def test_scale_convention(self, toy_sequences):
        # observations are in units 1/lam of the ground truth
        for seq in toy_sequences:
            lam = seq.gt_scale
            assert 0.5 <= lam <= 2.0
            for a, b in zip(seq.frames[:-1], seq.frames[1:]):
                obs = relative_pose(a.observed_pose, b.observed_pose).translation
                gt = relative_pose(a.gt_global_pose, b.gt_global_pose).translation
                np.testing.assert_allclose(lam * obs, gt, atol=1e-10)
                assert np.linalg.norm(obs) / np.linalg.norm(gt) == pytest.approx(1.0 / lam, rel=1e-10)

    def test_alignment_recovers_gt(self, toy_sequences):
        for seq in toy_sequences:
            for f in seq.frames:
                g = RigidPose(f.observed_pose.rotation, seq.gt_scale * f.observed_pose.translation)
                np.testing.assert_allclose(compose(g, seq.gt_alignment).matrix(), f.gt_global_pose.matrix(),
                                           atol=1e-10)

    def test_kf_has_unit_scale(self):
        gt = render_sequence(_sphere(), STILL, default_calibration(16), seed=0, modality=KF)
        assert simulate_sfm(gt, NoiseConfig(), seed=0).gt_scale == 1.0
        with pytest.raises(ConfigError):
            Sequence(0, gt.frames, gt_scale=2.0, modality=KF)

    def test_holes_and_noise(self, noisy_sequences):
        for seq in noisy_sequences:
            for f in seq.frames:
                clean = render_depth(seq.shape, f.gt_global_pose, f.calibration).valid()
                kept = f.depth.valid().sum() / clean.sum()
                assert kept == pytest.approx(0.8, abs=0.02)
                assert not (f.depth.valid() & ~clean).any()

    def test_pose_outliers(self):
        gt = render_sequence(_sphere(), OrbitConfig(n_frames=36, random_start=False, azimuth_jitter_deg=0.0),
                             default_calibration(16), seed=0)
        noise = NoiseConfig.off(random_alignment=False, random_scale=False, pose_outlier_fraction=0.1056)
        obs = simulate_sfm(gt, noise, seed=0)
        bad = [rotation_angle_matrix(a.observed_pose.rotation.matrix().T @ b.observed_pose.rotation.matrix()) > 1e-9
               for a, b in zip(gt.frames, obs.frames)]
        assert sum(bad) == 3


class TestDataset:
    def test_independent_of_workers(self):
        cfg = DatasetConfig(n_sequences=3, image_size=16, orbit=OrbitConfig(n_frames=6))
        a = make_dataset(11, cfg, workers=1)
        b = make_dataset(11, cfg, workers=3)
        for sa, sb in zip(a, b):
            assert sa.gt_scale == sb.gt_scale
            for fa, fb in zip(sa.frames, sb.frames):
                np.testing.assert_array_equal(fa.depth.depth, fb.depth.depth)
                np.testing.assert_array_equal(fa.observed_pose.matrix(), fb.observed_pose.matrix())

    def test_mixed_modality(self):
        cfg = DatasetConfig(n_sequences=4, image_size=16, modality="mixed", orbit=OrbitConfig(n_frames=4))
        mods = [s.modality for s in make_dataset(0, cfg, workers=1)]
        assert mods == [SFM, KF, SFM, KF]

    def test_validation(self):
        with pytest.raises(ConfigError):
            make_dataset(0, DatasetConfig(n_sequences=0))
        with pytest.raises(ConfigError):
            make_dataset(0, DatasetConfig(image_size=2))
