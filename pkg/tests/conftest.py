import numpy as np
import pytest

from uvhand.synthetic import mano_like_mesh, toy_hand_mesh, toy_hand_topology


@pytest.fixture(scope="session")
def toy_hand():
    return toy_hand_mesh()


@pytest.fixture(scope="session")
def toy_topology():
    return toy_hand_topology()


@pytest.fixture(scope="session")
def mano_like():
    return mano_like_mesh()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_rotation(rng) -> np.ndarray:
    """Uniform-ish random rotation matrix via QR of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q
