import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from repaint3d.geometry import orbit_camera

settings.register_profile("repo", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def front_cam():
    return orbit_camera(0.0, width=256)


@pytest.fixture(scope="session")
def side_cam():
    return orbit_camera(90.0, width=256)


# acceptance verdicts, echoed at the end of the session
VERDICTS: dict = {}


@pytest.fixture(scope="session")
def verdict():
    def record(criterion: str, ok: bool, detail: str) -> bool:
        line = f"{criterion} {'PASS' if ok else 'FAIL'}: {detail}"
        VERDICTS[criterion] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(VERDICTS, key=lambda k: int(k[1:])):
            terminalreporter.write_line(VERDICTS[key])
