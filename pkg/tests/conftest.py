import numpy as np
import pytest

from twophoton import AngularGrid, Disk, Grid, PhaseFunction, ScalarField

_ACCEPTANCE = pytest.StashKey[dict]()
N_CRITERIA = 12


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, {})

    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines[n] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        terminalreporter.write_line(lines.get(n, f"criterion {n:2d}: FAIL  not evaluated (error or deselected)"))


@pytest.fixture
def disk():
    return Disk()


@pytest.fixture
def small_medium(disk):
    """Constant coefficients on a coarse disk grid: (sigma_a, sigma_b, kernel, grid, angles)."""
    grid = Grid.over(disk, 25)
    return (ScalarField.constant(grid, 0.3), ScalarField.constant(grid, 0.1),
            PhaseFunction.isotropic(ScalarField.constant(grid, 0.1)), grid, AngularGrid.circle(16))


@pytest.fixture
def rng():
    return np.random.default_rng(20261015)
