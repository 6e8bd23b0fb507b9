import numpy as np
import pytest

from tokseg.checks import tiny_config
from tokseg.data import generate_dataset

_CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_CRITERIA] = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance line; call before asserting so failures are reported too."""
    def record(number: int, passed: bool, detail: str):
        request.config.stash[_CRITERIA][number] = (bool(passed), detail)
        print(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
    return record


def pytest_terminal_summary(terminalreporter, config):
    seen = config.stash.get(_CRITERIA, {})
    if not seen:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in range(1, 13):
        if n in seen:
            ok, detail = seen[n]
            terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n:2d}: NOT RUN")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def small_corpus():
    return generate_dataset(5, 24, size=64)
