import numpy as np
import pytest
import torch

from prunetree.data import Dataset, synthetic_blobs
from prunetree.nn import init_model, resnet_spec

torch.set_num_threads(1)


@pytest.fixture
def tiny_spec():
    return resnet_spec(widths=(4, 8), blocks=(2, 2), input_shape=(3, 8, 8), num_classes=3)


@pytest.fixture
def tiny_model(tiny_spec):
    return init_model(tiny_spec, 11)


@pytest.fixture
def tiny_data():
    return synthetic_blobs(3, classes=3, samples=96, image_size=8)


@pytest.fixture
def batch32():
    rng = np.random.default_rng(5)
    return rng.uniform(0, 1, size=(32, 3, 8, 8)).astype(np.float32)


def random_dataset(n, shape, classes, seed):
    rng = np.random.default_rng(seed)
    return Dataset(rng.uniform(0, 1, size=(n, *shape)), rng.integers(0, classes, n), classes)
