import numpy as np
import pytest

from mwcnn import _accel


@pytest.fixture(params=["numba", "numpy"])
def backend(request):
    """Run a test once per kernel backend."""
    previous = _accel.get_backend()
    _accel.set_backend(request.param)
    yield request.param
    _accel.set_backend(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance results, filled by tests/test_acceptance.py and echoed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
