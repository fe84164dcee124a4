import numpy as np
import pytest
from hypothesis import settings

from robustcert.benchmarks import get_benchmark
from robustcert.certificate import search_certificate
from robustcert.dsl import parse_predicate
from robustcert.grid import rasterize_set

settings.register_profile("repo", deadline=None, max_examples=50)
settings.load_profile("repo")


@pytest.fixture(scope="session")
def lin1d():
    return get_benchmark("lin1d-stable").problem


@pytest.fixture(scope="session")
def lin1d_unstable():
    return get_benchmark("lin1d-unstable").problem


@pytest.fixture(scope="session")
def spiral():
    return get_benchmark("spiral2d").problem


@pytest.fixture(scope="session")
def lin1d_cert(lin1d):
    return search_certificate(lin1d, 0.1, 0.5, 20.0, (512,))


@pytest.fixture(scope="session")
def spiral_cert(spiral):
    return search_certificate(spiral, 0.05, 0.5, 20.0, (256, 256))


@pytest.fixture(scope="session")
def unit_interval_V(lin1d):
    """Cells of [-1, 1] on the 512-cell lin1d grid."""
    return rasterize_set(parse_predicate("x1^2 <= 1", 1), lin1d.lo, lin1d.hi, (512,))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE: dict = {}


@pytest.fixture(scope="session")
def acceptance_results():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[k])
