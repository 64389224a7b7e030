import json
import os
from typing import Any, Dict

import numpy as np
import pytest
import tensorflow as tf

from pipeline.run_config import RunConfig

tf.config.experimental.enable_op_determinism()

TINY_SETTINGS: Dict[str, Any] = {
    'image_size': 32,
    'patch_size': 8,
    'pool_size': 1,
    'feature_dim': 8,
    'embed_dim': 16,
    'hvq_layers': 2,
    'lavit_layers': 1,
    'codebook_size': 8,
    'codebook_dim': 4,
    'heads': 2,
    'mlp_ratio': 2,
    'mask_ratio': 0.4,
    'n_masks': 2,
    'hvq_epochs': 2,
    'lavit_epochs': 2,
    'batch_size': 4,
    'hvq_learning_rate': 1e-3,
    'lavit_learning_rate': 1e-3,
    'train_count': 10,
    'validation_fraction': 0.3,
    'test_normal_count': 4,
    'test_logical_count': 4,
    'test_structural_count': 4,
    'threads': 2,
    'plots': False,
}


def write_config(directory: str, **overrides: Any) -> str:
    settings = dict(TINY_SETTINGS, out_dir=os.path.join(directory, 'run'))
    settings.update(overrides)
    path = os.path.join(directory, 'config.json')
    with open(path, 'w') as config_file:
        json.dump(settings, config_file)
    return path


@pytest.fixture
def tiny_config_path(tmp_path) -> str:
    return write_config(str(tmp_path))


@pytest.fixture
def tiny_config(tiny_config_path) -> RunConfig:
    config = RunConfig(file_path=tiny_config_path)
    config.validate()
    return config


@pytest.fixture
def numpy_rng() -> np.random.Generator:
    return np.random.default_rng(1234)
