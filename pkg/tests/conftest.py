import numpy as np
import pytest
from hypothesis import settings

from cacrlab import kernels

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

BACKENDS = ["numpy", "numba"] if kernels.HAVE_NUMBA else ["numpy"]


@pytest.fixture(params=BACKENDS)
def backend(request):
    previous = kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(previous)


def unit_rows(rng, n, d):
    X = rng.standard_normal((n, d))
    return X / np.linalg.norm(X, axis=1, keepdims=True)
