import numpy as np
import pytest

from conic_ricci import ModelSpec, build_cone_fixture, build_model


@pytest.fixture(scope="session")
def model32():
    return build_model(ModelSpec(resolution=32, rho_max=14.0))


@pytest.fixture(scope="session")
def model48():
    return build_model(ModelSpec(resolution=48, rho_max=16.0))


@pytest.fixture(scope="session")
def model64():
    return build_model(ModelSpec(resolution=64))


@pytest.fixture(scope="session")
def fixture64():
    return build_cone_fixture(alpha=0.5, resolution=64, length=6.0)


@pytest.fixture(scope="session")
def ones(model48):
    return np.ones(model48.n_nodes)
