import numpy as np
import pytest

from dualtrack import AttentionWeights, ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_config():
    return ModelConfig.tiny()


def make_weights(d_m, n_heads, window=None, seed=0, random_bias=False):
    """Random attention weight set; optionally randomize the bias table."""
    rng = np.random.default_rng(seed)
    w = AttentionWeights.create(d_m, n_heads, window=window, rng=rng)
    for b in (w.bq, w.bk, w.bv, w.bo):
        b.data[...] = rng.normal(0.0, 0.02, b.data.shape)
    if random_bias and w.bias_table is not None:
        w.bias_table.data[...] = rng.normal(0.0, 0.5, w.bias_table.data.shape)
    return w
