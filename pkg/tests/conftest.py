from pathlib import Path

import pytest

from layerquant.corpus import CorpusSpec, build_batches
from layerquant.model import ModelConfig, init_model

REPO = Path(__file__).resolve().parents[1]
DATA = REPO / "data"
CHECKPOINT = DATA / "toy_checkpoint.safetensors"

TINY = ModelConfig(n_layers=4, d_model=16, n_heads=2, d_ff=32, max_seq_len=64)


@pytest.fixture(scope="session")
def tiny_model():
    return init_model(TINY, seed=7)


@pytest.fixture(scope="session")
def tiny_batch():
    spec = CorpusSpec.from_dir(DATA / "corpus" / "eval", seq_len=32, stride=32)
    return build_batches(spec, max_tokens=2000)


@pytest.fixture
def text_dir(tmp_path):
    d = tmp_path / "corpus"
    d.mkdir()
    (d / "a.txt").write_text("The lantern was lit at dusk near the mill.\n" * 8)
    (d / "b.txt").write_text("Anna carried the map to the harbour. " * 10)
    return d
