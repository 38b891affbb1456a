import numpy as np
import pytest
import torch

from dstdnn.config import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cfg():
    """Three block pairs at 16 channels; fast enough for gradient checks."""
    return ModelConfig(channels=16, res2_scales=[2, 2, 4], experts=[2, 2, 3],
                       sparse_ratios=[0.3, 0.1, 0.1], mfa_dim=24, embedding_dim=192,
                       filter_frames=40)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
    yield


# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
