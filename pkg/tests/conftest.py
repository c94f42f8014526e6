import numpy as np
import pytest

from affine_steer.model import LayerBlock, FrozenModel


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def linear(w, b=None):
    w = np.atleast_2d(np.asarray(w, dtype=float))
    b = np.zeros((1, w.shape[1])) if b is None else np.atleast_2d(np.asarray(b, dtype=float))
    return LayerBlock("linear", w.shape[0], w.shape[1], {"weight": w, "bias": b})


@pytest.fixture
def scalar_model():
    """x -> x, hooked, then a 1x1 readout: the hook sees the raw input column."""
    return FrozenModel((linear([[1.0]]), linear([[1.0]])), (0,))


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
