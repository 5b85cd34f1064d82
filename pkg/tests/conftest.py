import numpy as np
import pytest

from posefit.camera import from_vertical_fov
from posefit.skeleton import EVAL_JOINTS, default_skeleton


@pytest.fixture(scope="session")
def skeleton():
    return default_skeleton()


@pytest.fixture(scope="session")
def camera():
    return from_vertical_fov(54.0, (1280, 720))


@pytest.fixture(scope="session")
def eval_idx(skeleton):
    return skeleton.indices(EVAL_JOINTS)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
