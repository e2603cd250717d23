import numpy as np
import pytest

from geobeam import fields as fl
from geobeam import geometry as geo


@pytest.fixture(scope="session")
def disk():
    return geo.euclidean_disk(1.0)


@pytest.fixture(scope="session")
def diameter(disk):
    return geo.integrate_geodesic(disk, np.array([-1.0, 0.0]), np.array([1.0, 0.0]))


KINK_C = np.array([0.5, 0.3, -0.2])


def kink_form(p):
    """Continuous, non-smooth one-form ``c (0.8 - |x|)_+`` on ``R x disk``."""
    k = np.maximum(0.8 - np.linalg.norm(p, axis=-1), 0.0)
    return KINK_C.reshape((3,) + (1,) * k.ndim) * k


def step_potential(p):
    return np.where(np.linalg.norm(p, axis=-1) < 0.5, 1.0, 0.0) + 0.5


@pytest.fixture(scope="session")
def kink_sampled():
    grid = fl.Grid.uniform([-1.5, -1.6, -1.6], [1.5, 1.6, 1.6], [151, 161, 161])
    return fl.SampledOneForm(fl.GridMetric(grid), kink_form(grid.points()))


# one line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
