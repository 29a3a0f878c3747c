import sys

import numpy as np
import pytest
from hypothesis import settings

from surgphase import _kernels

settings.register_profile("ci", deadline=None, max_examples=200)
settings.load_profile("ci")

BACKENDS = ["numpy"] + (["numba"] if _kernels.HAVE_NUMBA else [])


@pytest.fixture(params=BACKENDS)
def backend(request):
    """Run the test once per kernel backend, restoring the default afterwards."""
    prev = _kernels.active
    _kernels.use_backend(request.param)
    yield request.param
    _kernels.active = prev


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        terminalreporter.write_line(lines[n])
