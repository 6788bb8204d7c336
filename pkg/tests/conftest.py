import numpy as np
import pytest

from gdfolio import tape
from gdfolio.data import SyntheticMarketSpec, synthesize

_CRITERIA: dict[int, tuple[str, bool, str]] = {}


def tape_grad(build, x):
    """Value and tape gradient of ``build(input_node)`` at ``x``."""
    node = tape.input("x")
    root = build(node)
    value = tape.forward(root, {node: np.asarray(x, dtype=float)})
    return float(value), tape.backward(root)[node]


def numeric(build):
    """Turn a graph builder into a plain function of an array."""
    def f(x):
        node = tape.input("x")
        return float(tape.forward(build(node), {node: np.asarray(x, dtype=float)}))
    return f


@pytest.fixture
def small_panel():
    return synthesize(SyntheticMarketSpec.random(5, 60, seed=3))


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(number, title, ok, detail)``."""
    def record(number, title, ok, detail=""):
        _CRITERIA[number] = (title, bool(ok), detail)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[number]
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d} {status}  {title}  {detail}")
