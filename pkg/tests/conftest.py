import numpy as np
import pytest

from dpges.scene import Camera
from dpges.verify import micro_scene


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running end-to-end checks")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def camera():
    return Camera.look_at([0.0, 0.0, -3.0], [0.0, 0.0, 0.0], width=32, height=32, fov_deg=40.0,
                          near=0.05, far=20.0)


@pytest.fixture
def micro(rng):
    return micro_scene(rng, 1)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
