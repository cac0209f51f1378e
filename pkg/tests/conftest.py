import numpy as np
import pytest
from hypothesis import settings

from sfdemc.engine import CoefficientModel
from sfdemc.segment import SegmentGrid, new_segment

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


def brownian(mu=0.0, sigma=1.0, r=0.0):
    return CoefficientModel(1, 1, r, lambda t, x, seg: mu, lambda t, x, seg: sigma,
                            memoryless=True, name="bm")


def gbm(mu=0.05, sigma=0.2, r=0.0):
    return CoefficientModel(1, 1, r, lambda t, x, seg: mu * x,
                            lambda t, x, seg: (sigma * x)[..., None], memoryless=True, name="gbm")


def point(value, r=0.0, m=0, dim=1):
    return new_segment(SegmentGrid(r, m), dim, constant=value)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
