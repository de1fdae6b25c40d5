from __future__ import annotations

import numpy as np
import pytest

from fastep.model import ModelSpec, Sites
from fastep.operators import dense_op


def random_model(rng, n=3, q=5, m=None, eta=1.0, noise_var=None, tau=None, sites=None):
    """Small dense Laplace model with well-conditioned X."""
    m = n + 1 if m is None else m
    X = dense_op(rng.normal(size=(m, n)))
    B = dense_op(rng.normal(size=(q, n)))
    noise_var = rng.uniform(0.2, 1.0) if noise_var is None else noise_var
    if sites is None:
        sites = Sites.laplace(rng.uniform(0.5, 2.0, q) if tau is None else tau, q)
    return ModelSpec(X, B, rng.normal(size=m), noise_var, sites, eta)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE_LINES: list[tuple[int, str]] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
