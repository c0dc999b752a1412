import numpy as np
import pytest

from seqground.data import WordVocab, generate_dataset
from seqground.model import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def scenes():
    return generate_dataset(24, seed=7)


@pytest.fixture(scope="session")
def small_cfg():
    return ModelConfig(hidden=16, enc_layers=1, dec_layers=1, heads=2, ffn_mult=2, bins=16, max_points=4,
                       word_vocab=len(WordVocab.default()), image_size=64, patch=16)


@pytest.fixture(autouse=True)
def _isolated_output(tmp_path, monkeypatch):
    """Keep CLI runs without --out from writing into the working directory."""
    monkeypatch.setenv("SEQGROUND_OUT", str(tmp_path / "default_out"))
