from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from fedavg_lab import numerics
from fedavg_lab.objectives import ClientPartition, LabeledDataset, LinearLeastSquares, Problem, Quadratic

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")


def quadratic_problem(centers, init, scale=1.0):
    """One point per client at each centre, so ``L_c = s/2 ||W - centre_c||^2`` exactly."""
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    data = LabeledDataset(centers, np.zeros(len(centers)))
    part = ClientPartition(tuple(np.array([c]) for c in range(len(centers))))
    return Problem(Quadratic(scale), data, part, numerics.param(init))


def scaled_linear_problem(seed=0, scale=0.2, n=8, d=2, N=2):
    """Interpolating least squares with a small Gram form, started at the minimiser."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d)) * scale
    w = np.linspace(0.5, -1.0, d)
    data = LabeledDataset(X, X @ w)
    return Problem(LinearLeastSquares(), data, ClientPartition.contiguous(n, N), numerics.param(w))


@pytest.fixture
def tmp_out(tmp_path):
    return tmp_path / "out"


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
