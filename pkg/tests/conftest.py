import numpy as np
import pytest
import torch

from mrsynth import phantom
from mrsynth.data import N_MASK_LABELS


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def phantom_config():
    return phantom.PhantomConfig()


@pytest.fixture(scope="session")
def small_corpus():
    """16 lesioned phantoms with atlas, 64x64 (shared, read-only)."""
    cfg = phantom.PhantomConfig(lesion_probability=1.0)
    instances, atlas = phantom.make_dataset(cfg, 16, seed=11)
    return instances, atlas


@pytest.fixture
def lesioned_mask():
    """A one-hot mask guaranteed to contain edema, cavity and tumor."""
    cfg = phantom.PhantomConfig(lesion_probability=1.0, cavity_probability=1.0)
    for seed in range(20):
        geom = phantom.sample_geometry(cfg, np.random.default_rng(seed), 7)
        if geom.cavity.any():
            return phantom.geometry_mask(geom)
    raise RuntimeError("no cavity-bearing geometry found")


def random_onehot(rng, h=16, w=16):
    labels = rng.integers(0, N_MASK_LABELS, size=(h, w))
    mask = np.zeros((N_MASK_LABELS, h, w), dtype=np.float32)
    for c in range(N_MASK_LABELS):
        mask[c][labels == c] = 1.0
    return mask


@pytest.fixture
def torch_seed():
    torch.manual_seed(0)
    return 0
