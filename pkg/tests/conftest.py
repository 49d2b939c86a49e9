import numpy as np
import pytest

from suss.fitting import FitConfig, fit_decomposition
from suss.synthetic import make_test_image


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    assert a.shape == b.shape
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_image():
    return make_test_image(0, size=16)


@pytest.fixture(scope="session")
def small_fit(small_image):
    """A quick fit on a 16x16 image, shared by score and CLI tests."""
    params4, traces = fit_decomposition(small_image, config=FitConfig(steps=40), seed=0)
    return params4, traces


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
