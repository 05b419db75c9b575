import hypothesis
import numpy as np
import pytest

from scene4d.synth import SceneSpec, camera_ring, look_at_camera

hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.register_profile("ci", max_examples=50, deadline=None)
hypothesis.settings.load_profile("ci")


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="запускать полноразмерные приёмочные тесты")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="нужен --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def stereo_pair():
    """Две камеры в 1 м друг от друга, смотрят на начало координат."""
    cam_a = look_at_camera(0, np.array([-0.5, -4.0, 1.0]),
                           np.zeros(3), 200.0, 160, 120)
    cam_b = look_at_camera(1, np.array([0.5, -4.0, 1.0]),
                           np.zeros(3), 200.0, 160, 120)
    return cam_a, cam_b


@pytest.fixture
def ring_cameras():
    spec = SceneSpec(n_cameras=6, width=96, height=72, focal=90.0)
    return camera_ring(spec)
