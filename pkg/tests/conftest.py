import logging

import numpy as np
import pytest
import torch

from attrobust.datasets import SYNTHETIC_MEAN, SYNTHETIC_STD, make_synthetic_shapes
from attrobust.models import build_model

logging.getLogger("attrobust").setLevel(logging.ERROR)


@pytest.fixture(scope="session")
def shapes_small():
    """A small synthetic batch shared across tests (64 images, 10 classes)."""
    return make_synthetic_shapes(64, seed=123)


@pytest.fixture(scope="session")
def cnn_bundle():
    """Randomly initialized small CNN; enough for contract tests."""
    return build_model("small_cnn", seed=7, mean=SYNTHETIC_MEAN, std=SYNTHETIC_STD)


@pytest.fixture()
def linear_bundle():
    """Linear model with identity normalization: f(x) = W x + b, known gradients."""
    b = build_model("linear", input_shape=(3, 8, 8), num_classes=5, seed=3,
                    mean=(0.0,), std=(1.0,))
    return b


@pytest.fixture()
def batch(shapes_small):
    x = torch.from_numpy(shapes_small.images[:16])
    y = torch.from_numpy(shapes_small.labels[:16])
    return x, y


def rng(seed=0):
    return np.random.default_rng(seed)
