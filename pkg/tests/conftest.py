import dataclasses

import pytest

from ibf.augment import AugmentConfig
from ibf.io import SynthSpec, make_synthetic_cut
from ibf.trainer import TrainConfig

SMALL_RING = SynthSpec(width=64, height=64, n_frames=5, radius=10, stroke=2.0, velocity=(3.0, 1.0))


@pytest.fixture(scope="session")
def small_cut():
    return make_synthetic_cut(SMALL_RING, midframes=False)[0]


@pytest.fixture(scope="session")
def small_cut_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cut")
    make_synthetic_cut(SMALL_RING, d, midframes=False)
    return d


@pytest.fixture
def tiny_config():
    """A channel-capped network on 32x32 crops: a few iterations per second."""
    return TrainConfig(batch_size=2, learning_rate=1e-3, iterations=4, checkpoint_every=2,
                       keep_last=2, augment=AugmentConfig(delta=4, crop=(32, 32)),
                       seed=5, channel_cap=8)


def with_(cfg, **kw):
    return dataclasses.replace(cfg, **kw)
