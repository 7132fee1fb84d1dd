import numpy as np
import pytest

from cemgms.fem import assemble_operators
from cemgms.grid import build_grid
from cemgms.media import PermeabilityField, synth_channel_field, uniform_field
from cemgms.spectral import build_aux_space


@pytest.fixture(scope="session")
def small_grid():
    return build_grid(20, 20, 4, 4)


@pytest.fixture(scope="session")
def rough_field(small_grid):
    rng = np.random.default_rng(3)
    return PermeabilityField(np.exp(rng.normal(0.0, 1.5, (small_grid.nfy, small_grid.nfx))))


@pytest.fixture(scope="session")
def rough_ops(small_grid, rough_field):
    return assemble_operators(small_grid, rough_field)


@pytest.fixture(scope="session")
def rough_aux(rough_ops):
    return build_aux_space(rough_ops, L=2)


@pytest.fixture(scope="session")
def unit_ops(small_grid):
    return assemble_operators(small_grid, uniform_field(small_grid))


@pytest.fixture(scope="session")
def channel_ops():
    g = build_grid(40, 40, 4, 4)
    return assemble_operators(g, synth_channel_field(g, 7, 1e4, 4, 6))


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion, then assert it."""
    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA[number] = line
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
