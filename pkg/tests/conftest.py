import pytest

from attnloop.model import ModelParams, NoiseKernel

START = 1167609600  # 2007-01-01T00:00:00Z, a Monday
WEEK = 7 * 86_400
DAY = 86_400


def make_params(variant="Reinforced", a=1.0, theta=1.0, family="Exponential", noise_params=(), **kw):
    return ModelParams(variant, a, theta, NoiseKernel(family, noise_params), **kw)


@pytest.fixture
def reinforced():
    return make_params()


@pytest.fixture
def iid():
    return make_params("Iid")
