import numpy as np
import pytest

from data_weighter.config import ExperimentConfig
from data_weighter.data import ImageSet
from data_weighter.metaloss import MetaBatchConfig, sample_episode
from data_weighter.ndmath import RandomStream
from data_weighter.net import HeadKind, MLPSpec, init_params


@pytest.fixture
def rng():
    return RandomStream(1234)


@pytest.fixture
def small_classifier(rng):
    """Rotation classifier on 4x4 images: 16-6-4, 130 parameters."""
    spec = MLPSpec((16, 6, 4), "tanh", HeadKind.CLASSIFIER)
    return spec, init_params(spec, rng.child(1))


@pytest.fixture
def small_vae(rng):
    spec = MLPSpec((9, 5, 2), "tanh", HeadKind.VAE)
    theta = init_params(spec, rng.child(2))
    return spec, theta


@pytest.fixture
def labelled_target(rng):
    """Twenty random 4x4 images in two classes."""
    images = rng.child(3).uniform((20, 4, 4))
    return ImageSet(images, np.repeat([0, 1], 10))


@pytest.fixture
def episode(labelled_target, rng):
    return sample_episode(labelled_target, MetaBatchConfig(ways=2, shots=3, queries=2), rng.child(4))


@pytest.fixture
def tiny_config():
    """A synthetic-domain run small enough for unit tests."""
    return ExperimentConfig(
        method="bdw",
        task="rotation",
        synthetic=True,
        target="discs",
        synth_per_domain=40,
        synth_size=8,
        target_train=24,
        target_test=12,
        source_cap=None,
        ways=2,
        shots=2,
        queries=2,
        epochs=3,
        batch_size=16,
        hidden=6,
        alpha=0.05,
        eta=10.0,
        seed=3,
        out_dir=None,
    )
