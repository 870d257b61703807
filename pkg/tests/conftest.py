import numpy as np
import pytest

from mvreg.projection import ProjectionGeometry
from mvreg.volume import generate_phantom, head_phantom_spec

ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance_log(request):
    """Append one PASS/FAIL line per criterion; printed in the terminal summary."""

    def log(number, ok, detail):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.stash[ACCEPTANCE_KEY].append(line)
        print(line)
        return ok

    return log


@pytest.fixture(scope="session")
def small_volume():
    # 25.6 cm cube at 4 mm: the head phantom fits, renders are fast
    return generate_phantom(head_phantom_spec(11, noise_hu=0.0), (64, 64, 64), (4.0, 4.0, 4.0))


@pytest.fixture(scope="session")
def small_geometry():
    # 2 mm/px at isocenter
    return ProjectionGeometry(detector_dims=(96, 96), detector_spacing=(3.0, 3.0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
