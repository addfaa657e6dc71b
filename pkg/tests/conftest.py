"""
Shared fixtures: small configurations and bundles that train in well under
a second per epoch.
"""

import numpy as np
import pytest

from src.core.config import Config
from src.data import datasets


def tiny_config(**overrides) -> Config:
    """Defaults scaled down for unit tests; keyword overrides use section__key names"""
    config = Config(use_env=False)
    values = {
        'dataset.n_classes': 3,
        'dataset.n_source': 60,
        'dataset.n_target_unlabeled': 48,
        'dataset.n_target_test': 30,
        'dataset.shots': 2,
        'model.hidden': [16],
        'model.embedding_dim': 8,
        'views.n_local': 2,
        'training.epochs': 3,
        'training.iters_per_epoch': 4,
        'training.warmup_epochs': 1,
        'training.eta_sup': 2,
        'training.batch_unlabeled': 8,
        'training.top_k': 3,
        'training.lr_peak': 0.01,
        'training.lr_floor': 0.001,
    }
    values.update({key.replace('__', '.'): value for key, value in overrides.items()})
    for key, value in values.items():
        config.set_value(key, value)
    config.validate()
    return config


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def config():
    return tiny_config()


@pytest.fixture
def bundle(config):
    return datasets.generate(config.dataset)
