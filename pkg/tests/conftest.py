import numpy as np
import pytest
import torch

from vidclip.encoders import build_model
from vidclip.tokenizer import build_tokenizer
from vidclip.videogen import default_roster


@pytest.fixture(scope="session")
def roster():
    return default_roster()


@pytest.fixture(scope="session")
def vocab(roster):
    return build_tokenizer([c.name for c in roster])


@pytest.fixture
def tiny_model(vocab):
    """Two-layer, width-16 model on 16px frames: cheap enough for per-test builds."""
    return build_model(vocab, embed_dim=16, image_size=16, patch_size=8, layers=2, heads=2, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


# acceptance criteria append (number, title, passed, detail) here; printed after the run
CRITERIA = []


def record_criterion(number, title, passed, detail):
    CRITERIA.append((number, title, passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(CRITERIA):
        terminalreporter.write_line(f"criterion {number} {'PASS' if passed else 'FAIL'}: {title} ({detail})")
