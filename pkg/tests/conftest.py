import numpy as np
import pytest

from acceptance_log import LINES
from fedseg.data import DomainSpec, generate
from fedseg.tensor import Rng


def central_difference(f, x, idx, h=1e-5):
    """d f / d x[idx] by central differences; restores x afterwards."""
    old = x[idx]
    x[idx] = old + h
    fp = f()
    x[idx] = old - h
    fm = f()
    x[idx] = old
    return (fp - fm) / (2 * h)


def rel_error(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


@pytest.fixture
def nprng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate(DomainSpec("tiny", image_size=32), 8, Rng(21))


@pytest.fixture(scope="session")
def tiny_pair():
    a = generate(DomainSpec("ct", "bright_fg", image_size=32), 6, Rng(5))
    b = generate(DomainSpec("pet", "blurred_hot_fg", image_size=32), 5, Rng(5))
    return a, b


def pytest_terminal_summary(terminalreporter):
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
