import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from edgevit.model import ModelConfig, init_model  # noqa: E402


def toy_config() -> ModelConfig:
    # p=4 on 32px gives N=64; d=8, L=2, H=2, q=v=8, e=16, C=10
    return ModelConfig.uniform(32, 4, 2, 8, 2, 8, 8, 16, 10)


@pytest.fixture
def toy_cfg():
    return toy_config()


@pytest.fixture
def toy_model():
    # non-zero biases so every bias path is exercised
    return init_model(toy_config(), seed=0, bias_std=0.1, embed_std=0.5)


@pytest.fixture
def toy_images():
    return np.random.default_rng(0).standard_normal((4, 3, 32, 32)).astype(np.float32)


@pytest.fixture
def toy_labels():
    return np.array([3, 7, 0, 9])


@pytest.fixture
def small_model():
    """A smaller spatial model for tests that need many forward passes."""
    cfg = ModelConfig.uniform(8, 4, 2, 8, 2, 8, 8, 12, 4)
    return init_model(cfg, seed=1, bias_std=0.1, embed_std=0.5)


@pytest.fixture
def small_images():
    return np.random.default_rng(1).standard_normal((6, 3, 8, 8)).astype(np.float32)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
