import numpy as np
import pytest

from ltcmh.dataset import LongTailSpec, synthesize_long_tailed


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def tiny_spec(**kw):
    """A 4-class long-tailed spec small enough for second-scale training."""
    defaults = dict(groups=[(2, 30), (2, 6)], d_x=8, d_y=6,
                    extra_per_class=4, mixed_fraction=0.2, latent_dim=4,
                    noise_std=0.3)
    defaults.update(kw)
    return LongTailSpec(**defaults)


@pytest.fixture
def tiny_dataset():
    return synthesize_long_tailed(tiny_spec(), seed=0)
