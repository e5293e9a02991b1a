import numpy as np
import pytest

from gpsmatch.data import Dataset


# one line per acceptance criterion, echoed again in the session summary
ACCEPTANCE_LINES = []


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False,
                     help="run the long desk-scale benchmark items")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def linear_dataset(n=60, q=2, seed=0, outcomes=True):
    """Small confounded dataset with a linear exposure model."""
    rng = np.random.default_rng(seed)
    c = rng.normal(size=(n, q))
    w = 5.0 + c @ np.linspace(1.0, 0.5, q) + rng.normal(size=n)
    y = 1.0 + 0.5 * w + c.sum(axis=1) + rng.normal(size=n) if outcomes else None
    return Dataset(w, c, y)


@pytest.fixture
def small():
    return linear_dataset()
