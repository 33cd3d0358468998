import numpy as np
import pytest

from lookaround.augment import (PerturbationConfig, dibr_warp, forward_component, hole_fraction, identity_delta,
                                sample_perturbation, silhouette)
from lookaround.geometry import DepthMap, RigidPose, Rotation, backproject, compose
from lookaround.kernels import nn_argmin
from lookaround.synth import (DatasetConfig, Frame, NoiseConfig, OrbitConfig, default_calibration, depth_descriptor,
                              make_dataset)


def _plane_frame(depth=4.0, size=32):
    k = default_calibration(size)
    dm = DepthMap(np.full((size, size), depth))
    g = RigidPose.identity()
    return Frame(0, k, g, g, dm, depth_descriptor(dm))


@pytest.fixture(scope="module")
def clean_sequences():
    cfg = DatasetConfig(n_sequences=2, image_size=32, orbit=OrbitConfig(n_frames=12),
                        noise=NoiseConfig.off(random_alignment=False, random_scale=False))
    return make_dataset(0, cfg, workers=1)


class TestPerturbation:
    def test_zero_bounds_identity(self, rng):
        d = sample_perturbation(PerturbationConfig(0.0, 0.0, 0.0), rng)
        np.testing.assert_array_equal(d.matrix(), np.eye(4))

    def test_bounds(self, rng):
        cfg = PerturbationConfig(np.deg2rad(10.0), 0.3, 0.3)
        for _ in range(1000):
            d = sample_perturbation(cfg, rng)
            assert d.rotation.angle() <= cfg.max_angle + 1e-12
            assert np.all(np.abs(d.translation[:2]) <= cfg.lateral)
            assert 0.0 <= forward_component(d) <= 2 * cfg.forward_mean

    def test_forward_mean(self):
        rng = np.random.default_rng(0)
        cfg = PerturbationConfig(np.deg2rad(10.0), 0.3, 0.1)
        fwd = [forward_component(sample_perturbation(cfg, rng)) for _ in range(10_000)]
        assert np.mean(fwd) == pytest.approx(0.1, abs=0.01)

    def test_seeded(self):
        cfg = PerturbationConfig.for_radius(6.0)
        a = sample_perturbation(cfg, np.random.default_rng(5))
        b = sample_perturbation(cfg, 5)
        np.testing.assert_array_equal(a.matrix(), b.matrix())

    def test_for_radius_and_scaled(self):
        cfg = PerturbationConfig.for_radius(6.0)
        assert cfg.lateral == pytest.approx(0.3)
        assert cfg.forward_mean == pytest.approx(0.3)
        half = cfg.scaled(0.5)
        assert half.max_angle == pytest.approx(cfg.max_angle / 2)
        assert half.lateral == pytest.approx(0.15)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            PerturbationConfig(-1.0, 0.0, 0.0)


class TestDibr:
    def test_identity_bit_equal(self, clean_sequences):
        for f in clean_sequences[0].frames:
            new, g_star, dm = dibr_warp(f, None, identity_delta())
            np.testing.assert_array_equal(dm.depth, f.depth.depth)
            np.testing.assert_array_equal(g_star.matrix(), f.observed_pose.matrix())
            np.testing.assert_array_equal(new.descriptor, f.descriptor)

    def test_forward_plane(self):
        for tau in (0.1, 0.5, 1.0):
            f = _plane_frame(4.0)
            _, _, dm = dibr_warp(f, None, RigidPose(Rotation.identity(), [0.0, 0.0, -tau]))
            ok = dm.valid()
            np.testing.assert_allclose(dm.depth[ok], 4.0 - tau, atol=1e-6)
            # the image magnifies about the principal point; covered pixels are exactly the splat targets
            k = f.calibration
            v, u = np.mgrid[0:k.height, 0:k.width]
            tu = np.rint((u - k.cx) * 4.0 / (4.0 - tau) + k.cx).astype(int)
            tv = np.rint((v - k.cy) * 4.0 / (4.0 - tau) + k.cy).astype(int)
            inside = (tu >= 0) & (tu < k.width) & (tv >= 0) & (tv < k.height)
            expected = np.zeros_like(ok)
            expected[tv[inside], tu[inside]] = True
            np.testing.assert_array_equal(ok, expected)

    def test_lateral_plane_shift(self):
        # sideways motion of one pixel footprint shifts the image by one column
        f = _plane_frame(4.0)
        step = 4.0 / f.calibration.fx
        _, _, dm = dibr_warp(f, None, RigidPose(Rotation.identity(), [-step, 0.0, 0.0]))
        assert not dm.valid()[:, -1].any()
        assert dm.valid()[:, :-1].all()
        np.testing.assert_allclose(dm.depth[:, :-1], 4.0, atol=1e-12)

    def test_pose_composition(self, clean_sequences):
        f = clean_sequences[0].frames[3]
        d = sample_perturbation(PerturbationConfig.for_radius(6.0), 1)
        new, g_star, _ = dibr_warp(f, None, d, gt_scale=2.0)
        np.testing.assert_allclose(g_star.matrix(), d.matrix() @ f.observed_pose.matrix(), atol=1e-12)
        d_gt = RigidPose(d.rotation, 2.0 * d.translation)
        np.testing.assert_allclose(new.gt_global_pose.matrix(), compose(d_gt, f.gt_global_pose).matrix(),
                                   atol=1e-12)

    def test_warped_points_stay_on_surface(self, clean_sequences):
        dists, extent = [], None
        for seq in clean_sequences:
            extent = 2 * seq.shape.extent
            dense = seq.shape.sample_surface(100_000, np.random.default_rng(1))
            for j, f in enumerate(seq.frames[::3]):
                d = sample_perturbation(PerturbationConfig.for_radius(6.0), [seq.id, j])
                _, g_star, dm = dibr_warp(f, None, d)
                pts = g_star.inverse().apply(backproject(dm, f.calibration).points)
                dists.append(nn_argmin(pts, dense)[1] / extent)
        dists = np.concatenate(dists)
        assert np.median(dists) < 0.01
        assert np.percentile(dists, 95) < 0.02

    def test_round_trip(self, clean_sequences):
        errs = []
        for seq in clean_sequences:
            extent = 2 * seq.shape.extent
            for j, f in enumerate(seq.frames):
                d = sample_perturbation(PerturbationConfig.for_radius(6.0), [seq.id, j])
                new, _, _ = dibr_warp(f, None, d)
                back = dibr_warp(new, None, d.inverse())[2]
                ok = f.depth.valid() & back.valid()
                errs.append(np.abs(back.depth[ok] - f.depth.depth[ok]) / extent)
        errs = np.concatenate(errs)
        assert np.percentile(errs, 99) < 0.02
        assert np.median(errs) < 0.005

    def test_size_mismatch(self):
        f = _plane_frame(size=16)
        with pytest.raises(ValueError):
            dibr_warp(f, DepthMap(np.ones((8, 8))), identity_delta())


class TestMasks:
    def test_silhouette_fills_enclosed_holes(self):
        d = np.full((5, 5), np.nan)
        d[1:4, 1:4] = 1.0
        d[2, 2] = np.nan
        sil = silhouette(DepthMap(d))
        expected = np.zeros((5, 5), dtype=bool)
        expected[1:4, 1:4] = True
        np.testing.assert_array_equal(sil, expected)

    def test_silhouette_keeps_open_notch(self):
        d = np.full((4, 4), 1.0)
        d[0, 1] = np.nan
        sil = silhouette(DepthMap(d))
        assert not sil[0, 1]

    def test_hole_fraction(self):
        d = np.ones((4, 5))
        d[0, :3] = np.nan
        assert hole_fraction(DepthMap(d)) == pytest.approx(3 / 20)
