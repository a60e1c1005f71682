import os

os.environ.setdefault("REFSR_THREADS", "1")

import numpy as np
import pytest

from refsr import phantom
from refsr.core import DwiCase, DwiImage, Volume


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def small_case(rng):
    """Random non-physical case: 8x16x16, 6 directions at b=500."""
    dirs = phantom.make_direction_set(6, seed=1)
    b0 = DwiImage(Volume(rng.random((8, 16, 16)) + 0.5))
    dwis = [
        DwiImage(Volume(rng.random((8, 16, 16)) * 0.5 + 0.1), 500.0, tuple(g))
        for g in dirs
    ]
    return DwiCase("rand", b0, dwis)


@pytest.fixture(scope="session")
def noiseless_phantom():
    cfg = phantom.PhantomConfig(dims=(8, 32, 32), n_directions=12, b_values=(500.0,), seed=5)
    case, tensors = phantom.make_phantom_case(cfg, "ph")
    return cfg, case, tensors
