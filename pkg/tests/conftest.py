import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

from morphface.model import FaceMesh  # noqa: E402
from morphface.synthetic import random_basis, toy_head_basis  # noqa: E402


@pytest.fixture(scope="session")
def small_basis():
    return random_basis(40, 4, 3, n_landmarks=12, seed=7)


@pytest.fixture(scope="session")
def fit_basis():
    return random_basis(200, 10, 5, n_landmarks=20, seed=1)


@pytest.fixture(scope="session")
def toy_basis():
    return toy_head_basis()


@pytest.fixture
def unit_square():
    verts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]])
    return FaceMesh(verts, np.array([[0, 1, 2], [0, 2, 3]]))
