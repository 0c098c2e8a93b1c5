import numpy as np
import pytest

from esft_serve.checkpoint import BaseModel
from esft_serve.config import ModelConfig
from esft_serve.toy import TOY_CONFIG, build_engine, reference_like_adapters

SMALL = ModelConfig(num_layers=2, num_experts=8, top_k=2, hidden=8, intermediate=4, vocab_size=32, max_positions=64)


@pytest.fixture(scope="session")
def small_model():
    return BaseModel.generate(SMALL, seed=1)


@pytest.fixture(scope="session")
def toy_model():
    return BaseModel.generate(TOY_CONFIG, seed=0)


@pytest.fixture(scope="session")
def toy_adapters():
    return reference_like_adapters(TOY_CONFIG, 3, seed=0)


@pytest.fixture
def toy_engine(toy_model, toy_adapters):
    return build_engine(toy_model, toy_adapters, page_size=4096, debug=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
