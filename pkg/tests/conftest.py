import functools

import pytest

from shellgrasp.eval.harness import load_fixture
from shellgrasp.eval.render import render_range_image
from shellgrasp.eval.truth import label_scene
from shellgrasp.shell import HandParams


@functools.lru_cache(maxsize=None)
def _rendered(name):
    spec = load_fixture(name)
    rendering = render_range_image(spec)
    return rendering, tuple(label_scene(spec, rendering, HandParams()))


@pytest.fixture(scope="session")
def rendered():
    """``rendered(name) -> (rendering, truth)`` for shipped fixtures, cached per session."""
    return _rendered


ACCEPTANCE_LINES = {}


def record_criterion(number, passed, detail):
    """Store one acceptance verdict line; returns ``passed`` for asserting."""
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
