import numpy as np
import pytest

from flashsloth.model import ModelConfig

ACCEPTANCE_LINES: list = []


def tiny(**changes) -> ModelConfig:
    base = ModelConfig(
        n_layers=2, d_model=8, n_heads=2, d_ff=16, d_vis=4, grid=6, s=3,
        n_queries=2, embq_layer=1, embq_dim=8, max_seq=256,
    )
    return base.replace(**changes).validate()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
