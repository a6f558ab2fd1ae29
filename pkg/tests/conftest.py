import numpy as np
import pytest

from genomic_interpreter.model import make_config


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_config():
    """n=16, d=4, K=2, m=4, T=3 with 4-token windows."""
    return make_config(16, 4, 3, d_model=4, window=4, heads=2, width_cap=64, depth=2)

