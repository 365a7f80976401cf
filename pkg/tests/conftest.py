import numpy as np
import pytest

from fedrecsim.models import LocalGraph, Recommender, init_public


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_pub(rng, num_items=12, dim=4, hidden=(8, 6, 3), bias_std=0.3):
    """Small public parameters with nonzero biases so no unit sits exactly at a ReLU kink."""
    pub = init_public(num_items, dim, list(hidden), rng, init_std=0.5)
    for k in pub.theta:
        if k.startswith("b"):
            pub.theta[k] = rng.normal(0.0, bias_std, size=pub.theta[k].shape)
    return pub


@pytest.fixture(params=["ncf", "lightgcn"])
def model(request):
    return Recommender(request.param)


def graph_of(items):
    return LocalGraph.of(items)


# one-line acceptance verdicts, printed at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
