import numpy as np
import pytest

from crossreg.geom import CameraIntrinsics, Pose, random_pose, transform
from crossreg.harness import generate_scene

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def acceptance():
    """Callable ``(criterion, ok, detail)`` that prints one verdict line and asserts it."""

    def record(criterion: int, ok, detail: str):
        verdict = {True: "PASS", False: "FAIL", None: "N/A"}[ok if ok is None else bool(ok)]
        line = f"criterion {criterion} {verdict}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        if ok is not None:
            assert ok, line

    return record


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def intrinsics():
    return CameraIntrinsics(500.0, 480.0, 320.0, 240.0, 640, 480)


def make_pnp_points(seed: int, n: int, pose: Pose | None = None):
    """Random points in front of the camera, returned in the cloud frame."""
    rng = np.random.default_rng(seed)
    pose = pose or random_pose(rng.integers(2 ** 32), 30.0, 1.0)
    cam = np.column_stack([rng.uniform(-2, 2, n), rng.uniform(-1.5, 1.5, n), rng.uniform(4, 8, n)])
    rt = pose.rotation.T
    cloud = (cam - pose.translation) @ rt.T
    assert np.allclose(transform(pose, cloud), cam)
    return cloud, pose


@pytest.fixture(scope="session")
def small_scene():
    return generate_scene(3)
