import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from localhughes.geometry import Domain, build_grid

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def unit_interval():
    return build_grid(Domain.interval(), 10)


@pytest.fixture
def corridor():
    """The two-exit 2D corridor with a narrow left exit and a narrow top-right exit."""
    dom = Domain.rectangle((0, 1), (0, 0.5), [((0, 0), (0, 0.1)), ((1, 0.5), (1, 0.4))], wall_width=0.025)
    return build_grid(dom, (40, 20))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
