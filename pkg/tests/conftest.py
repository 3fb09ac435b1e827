import numpy as np
import pytest

from spde_smp.adjoint import TREE_EXACT, solve_bsde
from spde_smp.coefficients import load_preset
from spde_smp.field import Grid1D
from spde_smp.forward import TimeGrid, sample_noise, solve_state


def pytest_configure(config):
    np.seterr(over="raise", invalid="raise", divide="raise")


@pytest.fixture(scope="session")
def shared_instance():
    """sigma-switch, M = 15, Nt = 8, T = 1, reference control +1, full binary tree."""
    problem = load_preset("sigma-switch")
    grid = Grid1D(15)
    noise = sample_noise(TimeGrid(problem.T, 8), 1, "tree")
    state = solve_state(problem, grid, 1.0, noise)
    return state, solve_bsde(state, TREE_EXACT)


# criterion number -> list of (label, passed, detail)
ACCEPTANCE: dict[int, list[tuple[str, bool, str]]] = {}


@pytest.fixture
def record():
    def _record(criterion: int, label: str, passed: bool, detail: str = "") -> bool:
        ACCEPTANCE.setdefault(criterion, []).append((label, bool(passed), detail))
        print(f"criterion {criterion} [{label}]: {'PASS' if passed else 'FAIL'} {detail}")
        return bool(passed)

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[k]
        ok = all(p for _, p, _ in parts)
        detail = "; ".join(f"{label}: {d}" for label, _, d in parts)
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
