import numpy as np
import pytest

from imbameta import _backend, kernel_stats, learner


@pytest.fixture(params=sorted(_backend.BACKENDS))
def backend(request, monkeypatch):
    """Run the test once per available kernel backend."""
    mod = _backend.BACKENDS[request.param]
    monkeypatch.setattr(kernel_stats, "_k", mod)
    monkeypatch.setattr(learner, "_k", mod)
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
