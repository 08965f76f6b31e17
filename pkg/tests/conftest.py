import numpy as np
import pytest

from jtner.datagen import LabeledQuery, Vocabulary
from jtner.encoder import EncoderConfig, init_params

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def tiny_config():
    return EncoderConfig(vocab_size=50, d_model=8, n_heads=2, n_layers=1, d_ff=16, max_len=8, seed=3)


@pytest.fixture
def tiny_vocab():
    return Vocabulary(["<pad>", "<unk>"] + [f"w{i}" for i in range(48)])


@pytest.fixture
def tiny_params(tiny_config):
    return init_params(tiny_config)


@pytest.fixture
def store_query():
    return LabeledQuery(["w3", "w7", "w1", "w9"], ["O", "B-STORE", "I-STORE", "O"], True)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
