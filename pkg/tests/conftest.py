import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gbnet import _kernels

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(params=["numba", "numpy"])
def backend(request):
    """Run a test once per kernel backend, restoring the previous choice."""
    previous = _kernels.use_numba()
    _kernels.use_numba(request.param == "numba")
    yield request.param
    _kernels.use_numba(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    acceptance = __import__("sys").modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for criterion in sorted(results):
            terminalreporter.write_line(results[criterion])
