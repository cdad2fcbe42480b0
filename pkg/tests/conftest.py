import numpy as np
import pytest

from mralign.dataset import build_dataset
from mralign.model import ModelConfig, as_leaves, init_params


@pytest.fixture(scope="session")
def tiny_ds():
    """Eight 4-class slides, one anchor each."""
    return build_dataset(8, seed=0)


@pytest.fixture(scope="session")
def small_cfg():
    return ModelConfig(vocab_size=64, d=8, d_proj=4, vis_hidden=8, mlp_hidden=8, n_blocks=1, max_caption=8, in_dim=32)


@pytest.fixture
def small_params(small_cfg):
    return init_params(small_cfg, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def leaves(small_params):
    return as_leaves(small_params)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, ok: bool, detail: str) -> str:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
