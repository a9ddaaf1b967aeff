import numpy as np
import pytest

from closure import GasModel, Profile, build_closure
from geometry import build_domain, build_nozzle
from notifications import reset_messages


@pytest.fixture(autouse=True)
def fresh_messages():
    reset_messages()
    yield
    reset_messages()


@pytest.fixture(scope="session")
def uniform_model():
    # rho = u = 1, pbar = 2 gives B = 7.5, S = 7 for gamma = 1.4
    return GasModel(1.4, 2.0, Profile.constant(1.0), Profile.constant(1.0), 1.5)


@pytest.fixture(scope="session")
def uniform_table(uniform_model):
    return build_closure(uniform_model, 0.1, nodes=601)


@pytest.fixture(scope="session")
def shear_model():
    hbar = 1.5
    k = np.pi / hbar
    rho = Profile(
        "shear rho",
        lambda x: 1.0 + 0.1 * np.cos(k * np.asarray(x, dtype=float)),
        lambda x: -0.1 * k * np.sin(k * np.asarray(x, dtype=float)),
    )
    u = Profile(
        "shear u",
        lambda x: 1.0 + np.asarray(x, dtype=float) ** 2 * (hbar - np.asarray(x, dtype=float)) ** 2,
        lambda x: 2.0 * np.asarray(x, dtype=float) * (hbar - np.asarray(x, dtype=float)) * (hbar - 2.0 * np.asarray(x, dtype=float)),
    )
    return GasModel(1.4, 10.0, rho, u, hbar)


@pytest.fixture(scope="session")
def shear_table(shear_model):
    return build_closure(shear_model, 0.1, nodes=1201)


@pytest.fixture(scope="session")
def strip_nozzle():
    return build_nozzle("strip")


@pytest.fixture
def strip_domain(strip_nozzle):
    return build_domain(strip_nozzle, 0.0, 1.0, 0.1)


@pytest.fixture(scope="session")
def unit_table():
    # unit-height uniform stream: Q = 1 and |grad psi| = 1 stays subsonic
    model = GasModel(1.4, 2.0, Profile.constant(1.0), Profile.constant(1.0), 1.0)
    return build_closure(model, 0.1, nodes=601)
