import numpy as np
import pytest

from nnleak.profiles import ATMEGA, CORTEX_M0, RISCV


@pytest.fixture
def atmega():
    return ATMEGA


@pytest.fixture(params=[ATMEGA, CORTEX_M0, RISCV], ids=lambda p: p.name)
def any_profile(request):
    return request.param


def same_model(a, b) -> bool:
    return a.dims == b.dims and all(
        np.array_equal(x.weights, y.weights) and np.array_equal(x.bias, y.bias)
        for x, y in zip(a.layers, b.layers))
