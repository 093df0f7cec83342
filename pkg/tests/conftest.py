from pathlib import Path

import numpy as np
import pytest

from densreg import numerics as nx
from densreg.data import generate_cubic_toy
from densreg.training import TrainConfig, run_pipeline, train_gaussian

FIXTURES = Path(__file__).parent / "fixtures"


def fast_config(**changes) -> TrainConfig:
    """Small epochs so that pipeline tests stay around a second."""
    base = dict(stage1_epochs=15, density_epochs=10, stage3_epochs=10, hidden=(32, 32), feature_dim=4)
    return TrainConfig(**{**base, **changes})


def numerical_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function of an array."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        up = f(x)
        x[idx] = old - eps
        down = f(x)
        x[idx] = old
        g[idx] = (up - down) / (2 * eps)
    return g


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def rng():
    return nx.make_rng(1234)


@pytest.fixture(scope="session")
def toy_small():
    return generate_cubic_toy(n_train=200, n_test=100, seed=0)


@pytest.fixture(scope="session")
def fast_model(toy_small):
    return run_pipeline(toy_small.train, fast_config())


@pytest.fixture(scope="session")
def fast_kde_model(toy_small):
    return run_pipeline(toy_small.train, fast_config(density="kde"))


@pytest.fixture(scope="session")
def fast_gaussian(toy_small):
    return train_gaussian(toy_small.train, fast_config())


# One line per acceptance criterion, filled in by test_acceptance.py.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
