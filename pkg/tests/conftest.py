import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from probekv.config import ModelConfig, toy_config
from probekv.model import init_model


def tiny_config(**overrides) -> ModelConfig:
    base = dict(
        vocab_size=260,
        n_soft=3,
        d_model=16,
        n_layers=2,
        n_heads=4,
        n_kv_heads=2,
        head_dim=4,
        max_seq=128,
        rope_theta=1000.0,
        mlp_hidden=24,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def tiny_weights():
    return init_model(tiny_config(), seed=0)


def random_prompt(rng, length, vocab=258):
    return rng.integers(0, vocab, size=length).astype(np.int64)
