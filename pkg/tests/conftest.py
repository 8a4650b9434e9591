import math
import sys

import pytest
from hypothesis import HealthCheck, settings

from pehsim import Excitation, reference_model

settings.register_profile("default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def ref():
    return reference_model()


@pytest.fixture(scope="session")
def exc():
    return Excitation(673.0)


def rel(a, b):
    return abs(a - b) / abs(b)


def close(a, b, rtol):
    return math.isclose(a, b, rel_tol=rtol)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is not None and module.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(module.RESULTS):
            terminalreporter.write_line(line)
