import csv
import io

import numpy as np
import pytest

from lookaround.completion import batch_loss_pcl
from lookaround.geometry import relative_pose, rotation_angle_matrix
from lookaround.learn import autodiff as ad
from lookaround.learn.train import (LOG_COLUMNS, PCL_LOG_COLUMNS, Stage1Result, TrainConfig, _stage2_data,
                                    complete, log_to_csv, pcl_log_to_csv, predict_poses, train_stage1)
from lookaround.synth import KF, SFM, ConfigError, DatasetConfig, NoiseConfig, OrbitConfig, make_dataset


def _relative_rotation_errors(model, sequences):
    s1 = model.stage1 if not isinstance(model, Stage1Result) else model
    errs = []
    for s in sequences:
        poses, _, _ = predict_poses(s1.vp, s1.norm, np.stack([f.descriptor for f in s.frames]), s1.config.hidden)
        for a in range(len(s)):
            for b in range(a + 1, len(s)):
                est = relative_pose(poses[a], poses[b]).rotation.matrix()
                obs = relative_pose(s.frames[a].observed_pose, s.frames[b].observed_pose).rotation.matrix()
                errs.append(rotation_angle_matrix(est.T @ obs))
    return np.array(errs)


class TestStage1:
    def test_fits_training_pairs(self, toy_sequences):
        # plain regression; l_R is sqrt(2) times the relative rotation angle
        r = train_stage1(toy_sequences, TrainConfig(iterations=2000, hidden=64, batch_size=32, probabilistic=False))
        assert np.sqrt(2) * _relative_rotation_errors(r, toy_sequences).mean() < 0.1

    def test_probabilistic_fit(self, toy_model, toy_sequences):
        assert np.sqrt(2) * _relative_rotation_errors(toy_model, toy_sequences).mean() < 0.2

    def test_recovers_doubled_scale(self):
        noise = NoiseConfig.off(scale_range=(2.0, 2.0))
        cfg = DatasetConfig(n_sequences=4, image_size=16, modality="mixed", orbit=OrbitConfig(n_frames=12), noise=noise)
        seqs = make_dataset(3, cfg, workers=1)
        assert {s.modality for s in seqs} == {SFM, KF}
        r = train_stage1(seqs, TrainConfig(iterations=2000, hidden=64, batch_size=32))
        for s in seqs:
            if s.modality == SFM:
                assert s.gt_scale == 2.0
                assert r.lambda_hat[s.id] == pytest.approx(2.0, rel=0.05)
            else:
                assert r.lambda_hat[s.id] == 1.0

    def test_scale_estimates(self, toy_model, toy_sequences):
        for s in toy_sequences:
            assert s.modality == SFM
            assert toy_model.stage1.lambda_hat[s.id] == pytest.approx(s.gt_scale, rel=0.05)

    def test_log(self, toy_model):
        s1 = toy_model.stage1
        assert len(s1.log) == s1.iterations
        assert [r["iter"] for r in s1.log] == list(range(s1.iterations))
        rows = list(csv.reader(io.StringIO(log_to_csv(s1.log))))
        assert rows[0][: len(LOG_COLUMNS)] == LOG_COLUMNS
        assert rows[0][len(LOG_COLUMNS):] == [f"lambda_{i}" for i in sorted(s1.lambda_hat)]
        assert len(rows) == s1.iterations + 1
        early = np.mean([r["loss"] for r in s1.log[:50]])
        late = np.mean([r["loss"] for r in s1.log[-50:]])
        assert late < early

    def test_deterministic(self, toy_sequences):
        cfg = TrainConfig(iterations=30, hidden=16, batch_size=8, seed=3)
        a = train_stage1(toy_sequences, cfg)
        b = train_stage1(toy_sequences, cfg)
        assert log_to_csv(a.log) == log_to_csv(b.log)
        for k in a.vp:
            np.testing.assert_array_equal(a.vp[k], b.vp[k])
        c = train_stage1(toy_sequences, TrainConfig(iterations=30, hidden=16, batch_size=8, seed=4))
        assert log_to_csv(c.log) != log_to_csv(a.log)

    def test_non_probabilistic(self, toy_sequences):
        r = train_stage1(toy_sequences, TrainConfig(iterations=5, hidden=8, batch_size=4, probabilistic=False))
        assert all(np.isnan(row["L_R"]) for row in r.log)

    def test_needs_two_sequences(self, toy_sequences):
        with pytest.raises(ConfigError):
            train_stage1(toy_sequences[:1], TrainConfig(iterations=1))

    def test_bad_config(self, toy_sequences):
        with pytest.raises(ConfigError):
            train_stage1(toy_sequences, TrainConfig(batch_size=0))


class TestStage2:
    def test_log(self, toy_model):
        s2 = toy_model.stage2
        rows = list(csv.reader(io.StringIO(pcl_log_to_csv(s2.log))))
        assert rows[0] == PCL_LOG_COLUMNS
        assert len(rows) == s2.iterations + 1
        assert np.mean([r["l_pcl"] for r in s2.log[-50:]]) < np.mean([r["l_pcl"] for r in s2.log[:50]])

    def test_support_shape(self, toy_model):
        s2 = toy_model.stage2
        assert s2.mean_cloud.shape == (s2.params.n_support, 3)

    def test_beats_average_cloud(self, toy_model, toy_sequences):
        s1, s2 = toy_model.stage1, toy_model.stage2
        inputs, targets = _stage2_data(toy_sequences, s1, s1.config)
        ours, avg = [], []
        for k, (pc, c) in enumerate(zip(inputs, targets)):
            sc = complete(s2.params, pc, 64, k)
            assert np.all(sc.masses >= 0)
            ours.append(float(batch_loss_pcl(ad.Tensor(sc.points), c).data))
            avg.append(float(batch_loss_pcl(ad.Tensor(s2.mean_cloud), c).data))
        assert np.mean(ours) < np.mean(avg)
