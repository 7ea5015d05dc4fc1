import numpy as np
import pytest

from evf.model import Batch, ModelConfig, SupportSet, VisualForesight, flatten_frames
from evf.pushworld import ObjectSpec, generate_corpus, generate_dataset


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig(context_dim=3, latent_dim=3, hidden_dim=8, predict_frames=3)


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_dataset(ObjectSpec.from_shape(2, 1.25, 0.6), N=8, T=6, seed=0, object_id=0)


@pytest.fixture(scope="session")
def other_dataset():
    return generate_dataset(ObjectSpec.from_shape(9, 0.5, 0.2), N=8, T=6, seed=1, object_id=1)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """manifest of 3 train and 2 test objects, 8 trajectories of 6 frames"""
    out = tmp_path_factory.mktemp("corpus")
    return generate_corpus(out, seed=0, K_train=3, K_test=2, N=8, T=6)


@pytest.fixture
def tiny_model(tiny_config):
    return VisualForesight(tiny_config, seed=0)


def make_support(dataset, indices):
    return SupportSet(flatten_frames(dataset.frames[list(indices)]), dataset.object_id)


def make_batch(dataset, indices):
    indices = list(indices)
    return Batch(flatten_frames(dataset.frames[indices]), dataset.actions[indices],
                 dataset.object_id)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
