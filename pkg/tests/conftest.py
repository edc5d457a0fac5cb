import numpy as np
import pytest

from bnalab.nnet import OptimizerConfig, build_mlp, train

ACCEPTANCE_LINES = {}


def record_criterion(number, passed, detail):
    ACCEPTANCE_LINES[number] = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def blob_problem():
    """Small separable 3-class problem and a model trained on it."""
    r = np.random.default_rng(7)
    centers = np.array([[0.2, 0.2, 0.5, 0.5], [0.8, 0.3, 0.5, 0.4], [0.4, 0.8, 0.3, 0.6]])
    y = np.repeat(np.arange(3), 150)
    x = np.clip(centers[y] + 0.05 * r.standard_normal((len(y), 4)), 0, 1)
    model = build_mlp(4, [6], 3, np.random.default_rng(0))
    train(model, x, y, OptimizerConfig(lr=0.02, epochs=20, batch_size=32, seed=0))
    return model, x, y
