import numpy as np
import pytest

from dpwarm.core import Dataset, RngStream, sample_unit_ball


@pytest.fixture
def rng():
    return RngStream(20240601)


@pytest.fixture
def ball_data(rng):
    return sample_unit_ball(4, 50, rng.substream(99))


def symmetric_data(d, n):
    """Rows +-v with exact zero mean."""
    half = np.linspace(0.1, 0.9, n // 2)[:, None] * np.eye(d)[np.arange(n // 2) % d]
    return Dataset(np.vstack([half, -half]))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[k])
