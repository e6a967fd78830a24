import pytest

from hekit import bfv


@pytest.fixture(scope="session")
def params_a():
    return bfv.make_params("A")


@pytest.fixture(scope="session")
def keys_a(params_a):
    return bfv.keygen(params_a, seed=101)


@pytest.fixture(scope="session")
def params_b():
    return bfv.make_params("B")


@pytest.fixture(scope="session")
def keys_b(params_b):
    return bfv.keygen(params_b, seed=202)
