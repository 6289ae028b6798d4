import numpy as np
import pytest

from src.datasets import make_blob_dataset
from src.models import Tensor4
from src.net import build_model, conv_bn_specs
from src.rng import RngStream


@pytest.fixture
def rng() -> RngStream:
    return RngStream(1234)


@pytest.fixture
def random_tensor():
    def make(n=4, h=5, w=6, c=3, seed=0, scale=1.0, offset=0.0):
        gen = np.random.default_rng(seed)
        return Tensor4(offset + scale * gen.standard_normal((n, h, w, c)))

    return make


@pytest.fixture
def tiny_dataset():
    return make_blob_dataset(classes=3, per_class=16, h=6, w=6, noise=0.3, seed=7)


@pytest.fixture
def tiny_model_factory():
    def make(seed=0, conv_channels=(3, 3), classes=3, in_channels=1):
        return build_model(conv_bn_specs(in_channels, conv_channels, classes), RngStream(seed))

    return make
