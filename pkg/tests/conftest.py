import numpy as np
import pytest

from bilrp.config import ModelConfig
from bilrp.synthetic import random_model

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def small_config():
    return ModelConfig(d_model=16, n_layers=2, n_heads=4, d_ff=32, vocab_size=40,
                       max_position=16, mask_token_id=3)


@pytest.fixture
def small_model(small_config):
    return random_model(small_config, seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
