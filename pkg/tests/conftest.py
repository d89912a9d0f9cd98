import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from octhandeye.volume import ScanGeometry

settings.register_profile("repo", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_geometry():
    return ScanGeometry(extent_x_mm=0.4, extent_y_mm=0.3, extent_z_mm=0.2, n_x=8, n_y=6, n_z=4)


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.VERDICTS):
            terminalreporter.write_line(line)
