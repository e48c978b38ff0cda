# conftest.py
"""Shared fixtures: seeded generators, precision reset, small model configs."""
import numpy as np
import pytest

import p1_config as config
from p2_tensor_core import current_graph, set_precision


@pytest.fixture(autouse=True)
def fresh_graph():
    """Every test starts with an empty graph at 64-bit precision."""
    current_graph().reset()
    set_precision(64)
    yield
    current_graph().reset()
    set_precision(64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cfg():
    """n=2, 16x16 model with 2x2 token grid."""
    return config.make_config(
        stages=2, channels=[3, 4, 5], height=16, width=16, attention_dim=4, patch={"token_grid": 2}
    )


@pytest.fixture
def default_cfg():
    return config.ModelConfig()


@pytest.fixture
def fast_run_cfg(small_cfg):
    """A RunConfig sized for quick harness tests."""
    return config.RunConfig(
        seed=3,
        model=small_cfg,
        optimizer=config.OptimizerConfig(learning_rate=0.05, steps=3, log_every=1),
        data=config.DataConfig(n_train=2, n_eval=4, density=3.0, min_side=3, max_side=5),
    )
