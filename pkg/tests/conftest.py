import numpy as np
import pytest

from hdpl.model import ModelConfig, TransformerModel


def small_config(mode="hybrid", **overrides) -> ModelConfig:
    base = dict(
        d_model=32, n_layers=2, n_heads=4, head_dim=8, d_hidden=64, vocab_size=37,
        seq_len=16, rank=8, k_groups=4, beta=0.001, mode=mode,
    )
    base.update(overrides)
    return ModelConfig(**base)


def random_tokens(config: ModelConfig, batch=2, seed=0, length=None):
    g = np.random.default_rng(seed)
    return g.integers(0, config.vocab_size, size=(batch, (length or config.seq_len) + 1))


@pytest.fixture
def hybrid_model():
    return TransformerModel(small_config("hybrid"), seed=3)


@pytest.fixture
def baseline_model():
    return TransformerModel(small_config("baseline"), seed=3)
