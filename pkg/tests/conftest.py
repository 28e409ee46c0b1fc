import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

from mvdet.kitti_io import Calibration  # noqa: E402
from mvdet.scenegen import SceneSpec, generate_scene  # noqa: E402


def pinhole(f=100.0, cx=50.0, cy=50.0) -> Calibration:
    """Camera frame == sensor frame, P = [[f,0,cx,0],[0,f,cy,0],[0,0,1,0]]."""
    P = np.array([[f, 0, cx, 0], [0, f, cy, 0], [0, 0, 1, 0]], dtype=np.float64)
    return Calibration(P, np.eye(3), np.hstack([np.eye(3), np.zeros((3, 1))]))


@pytest.fixture
def pinhole_calib():
    return pinhole()


@pytest.fixture(scope="session")
def scene7():
    return generate_scene(SceneSpec(seed=7))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_toy_batch(seed: int = 7):
    """The one-scene training fixture: scene `seed`, jittered oracle proposals, ROI-pooled features."""
    from mvdet.config import RunConfig
    from mvdet.fusenet.train import build_roi_batch
    from mvdet.pipeline import toy_data_config

    scene = generate_scene(SceneSpec(seed=seed))
    return build_roi_batch(scene, toy_data_config(RunConfig()), np.random.default_rng(0))


@pytest.fixture(scope="session")
def toy_batch():
    return make_toy_batch()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and getattr(mod, "RESULTS", None):
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
