import numpy as np
import pytest
from hypothesis import settings

from flatmuscle import skeleton

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def pend1():
    return skeleton.load_model("pend1")


@pytest.fixture(scope="session")
def arm3d():
    return skeleton.load_model("arm3d")


@pytest.fixture(scope="session")
def rankdef():
    return skeleton.load_model("rankdef")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
