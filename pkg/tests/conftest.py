import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from srpssm.ssm_core import ModelSpec  # noqa: E402

THREADS = os.cpu_count() or 1


@pytest.fixture(scope="session")
def iid():
    return ModelSpec.iid_gaussian()


@pytest.fixture(scope="session")
def pm():
    return ModelSpec.process_mean(0.5)


@pytest.fixture(scope="session")
def lin2():
    F = [[0.5, 0.1], [0.0, 0.3]]
    H = [[1.0, 0.0], [0.5, 1.0]]
    S1 = [[1.0, 0.2], [0.2, 0.8]]
    S2 = [[0.7, 0.1], [0.1, 0.9]]
    return ModelSpec.linear_gaussian(F, H, S1, S2, binding="G[0,0]", G=[[0.0], [0.0]], u=[1.0])
