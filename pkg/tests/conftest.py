import numpy as np
import pytest

from fedlorar.datagen import PopulationSpec, generate_population
from fedlorar.engine import AlgorithmSpec
from fedlorar.models import ModelSpec
from fedlorar.optim import ClientOptimizerSpec


@pytest.fixture
def small_model():
    return ModelSpec("mlp-1-hidden", input_dim=4, num_classes=3, hidden_dim=6)


@pytest.fixture
def small_population():
    spec = PopulationSpec(sizes=(40, 25, 12), num_classes=3, input_dim=4, seed=3, label_skew_alpha=0.5)
    return generate_population(spec)


@pytest.fixture
def small_algo():
    def make(kind="fedavg", weighting="size", rounds=3, **kw):
        kw.setdefault("client_opt", ClientOptimizerSpec("sgd", 0.1))
        kw.setdefault("local_epochs", 2)
        kw.setdefault("batch_sizes", 8)
        return AlgorithmSpec(kind=kind, weighting=weighting, rounds=rounds, **kw)

    return make


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
