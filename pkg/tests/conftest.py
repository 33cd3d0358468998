import numpy as np
import pytest

from lookaround.geometry import RigidPose, Rotation
from lookaround.synth import DatasetConfig, NoiseConfig, OrbitConfig, make_dataset


ACCEPTANCE_LINES = []


def record_criterion(name: str, passed: bool, detail: str) -> None:
    """Log one acceptance line; it is echoed in the terminal summary as well."""
    line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_pose(rng, t_scale=3.0) -> RigidPose:
    return RigidPose(Rotation.random(rng), t_scale * rng.standard_normal(3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_sequences():
    """Four small noise-free sequences with hidden alignment and scale."""
    cfg = DatasetConfig(n_sequences=4, image_size=16, orbit=OrbitConfig(n_frames=12),
                        noise=NoiseConfig.off())
    return make_dataset(3, cfg, workers=1)


@pytest.fixture(scope="session")
def noisy_sequences():
    cfg = DatasetConfig(n_sequences=3, image_size=16, orbit=OrbitConfig(n_frames=8))
    return make_dataset(5, cfg, workers=1)


TOY_TRAIN = dict(iterations=1000, hidden=64, batch_size=32, seed=0, support_size=64, pcl_encoder=32,
                 pcl_decoder=64, leave_out_min=16, leave_out_max=64, gt_points=256, pcl_iterations=400,
                 w_pcl=50.0, w_delta=500.0)


@pytest.fixture(scope="session")
def toy_model(toy_sequences):
    """Both stages trained on ``toy_sequences``."""
    from lookaround.learn.train import TrainConfig, train_stage1, train_stage2
    from lookaround.pipeline import Model

    cfg = TrainConfig(**TOY_TRAIN)
    s1 = train_stage1(toy_sequences, cfg)
    s2 = train_stage2(toy_sequences, s1, cfg)
    return Model(s1, s2, tuple(s.id for s in toy_sequences))
