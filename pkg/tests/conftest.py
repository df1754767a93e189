import numpy as np
import pytest

from mangolab.benchgen import SuiteParams, generate_suite
from mangolab.model import EmbeddingBatch, ModelConfig, init_params


@pytest.fixture(scope="session")
def small_suite():
    return generate_suite(SuiteParams.small(0))


def tiny_config(**kw) -> ModelConfig:
    base = dict(d_v=6, d=8, K_max=3, L_max=6, layers=2, heads=2, A=4, vocab=10, init_std=0.1)
    base.update(kw)
    return ModelConfig(**base)


def random_batch(config: ModelConfig, rng, B: int = 4) -> EmbeddingBatch:
    K, L = config.K_max, config.L_max
    region_mask = np.ones((B, K), dtype=bool)
    region_mask[:, -1] = rng.random(B) < 0.5
    lengths = rng.integers(2, L + 1, size=B)
    token_mask = np.arange(L)[None, :] < lengths[:, None]
    ids = rng.integers(3, config.vocab, size=(B, L))
    ids[:, 0] = config.cls_id
    ids[~token_mask] = config.pad_id
    labels = np.zeros((B, config.A))
    labels[np.arange(B), rng.integers(0, config.A, size=B)] = 1.0
    regions = rng.normal(size=(B, K, config.d_v)) * region_mask[..., None]
    return EmbeddingBatch(regions, region_mask, ids, token_mask, labels)


@pytest.fixture
def tiny():
    config = tiny_config()
    rng = np.random.default_rng(0)
    return config, init_params(config, rng), random_batch(config, rng)
