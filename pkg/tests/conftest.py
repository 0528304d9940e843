import numpy as np
import pytest

from gsinpaint.geometry import look_at
from gsinpaint.synth import gen_scene


def random_camera(rng, size=16, jitter_pp=True):
    """A camera somewhere on a shell around the origin, looking roughly at it."""
    d = rng.normal(size=3)
    center = d / np.linalg.norm(d) * rng.uniform(1.5, 4.0)
    target = rng.normal(0, 0.2, 3)
    down = np.array([0.0, 1.0, 0.0]) + rng.normal(0, 0.1, 3)
    if abs(np.dot(down, target - center)) > 0.99 * np.linalg.norm(down) * np.linalg.norm(target - center):
        down = np.array([1.0, 0.0, 0.0])
    f = rng.uniform(0.7, 1.5) * size
    cam = look_at(center, target, f, f * rng.uniform(0.9, 1.1), size, size, down=down)
    return cam


@pytest.fixture(scope="session")
def scene0():
    return gen_scene(0)


@pytest.fixture(scope="session")
def small_scenes():
    return [gen_scene(s, image_size=32, n_frames=7) for s in range(3)]


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
