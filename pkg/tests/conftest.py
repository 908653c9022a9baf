import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from uvdisp import fixtures as fx

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def sphere():
    """(template, subdivision map, base) for the level-2 / 2-iteration sphere."""
    return fx.sphere_template(2, 2, 1.0)


@pytest.fixture(scope="session")
def small_sphere():
    return fx.sphere_template(1, 2, 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for k in sorted(results):
            terminalreporter.write_line(results[k])
