import numpy as np
import pytest

from tsbridge.spectral import eigendecompose
from tsbridge.topology import build_complex, laplacian


@pytest.fixture
def triangle():
    return build_complex([[0, 1], [0, 2], [1, 2]], [[0, 1, 2]])


@pytest.fixture
def cycle3():
    return build_complex([[0, 1], [0, 2], [1, 2]])


@pytest.fixture
def path3():
    return build_complex([[0, 1], [1, 2]])


@pytest.fixture
def small_op():
    cx = build_complex([[0, 1], [1, 2], [2, 3], [3, 4], [4, 5], [0, 5], [1, 4]])
    return eigendecompose(laplacian(cx))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for result in sorted(RESULTS, key=lambda r: r.number):
            terminalreporter.write_line(result.line())
