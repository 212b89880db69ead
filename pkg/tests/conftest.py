import numpy as np
import pytest

from momo.data import DataConfig, build_train_data
from momo.model import ModelConfig


def tiny_model_config(**kw):
    base = dict(enc_layers=1, enc_dim=16, enc_heads=2, dec_layers=1, dec_dim=8, dec_heads=2, patch_size=4,
                image_size=8, vocab_size=18, max_text_pos=8, contrastive_dim=8)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_model_config()


@pytest.fixture
def tiny_data():
    return build_train_data(DataConfig(n_images=8, n_texts=8, n_pairs=8), image_size=8, patch_size=4, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# one line per acceptance criterion, echoed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
