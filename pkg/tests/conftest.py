import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from radpipe.config import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    """Smallest config that still exercises every architectural path."""
    return ModelConfig(
        sub_image_size=8, patch_size=4, embed_dim=8, vision_layers=2,
        icc_layers=1, qformer_layers=1, num_queries=2, lm_layers=2,
        vocab_cap=256, mask_ratio=0.5, temperature=0.5, icc_weight=1.0, seed=0,
    )


@pytest.fixture
def desk_cfg():
    return ModelConfig()
