import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pose_match.geometry import Pose, random_rotation

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_pose(seed: int, scale: float = 1.0) -> Pose:
    rng = np.random.default_rng(seed)
    return Pose(random_rotation(rng), rng.normal(scale=scale, size=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed after the run whatever the capture mode
ACCEPTANCE_LINES: list = []


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
