import numpy as np
import pytest

from adaptcrt.designs import ParallelStage1, Stage2Grid
from adaptcrt.model import CorrelationModel, OutcomeModel
from adaptcrt.optimiser import DesignProblem, calibrate

THETA4 = CorrelationModel("nested-exchangeable", 0.05, 0.8)
GAUSS = OutcomeModel("gaussian")


def parallel_problem(k1=15, m1=20, small_sample=True, **kw):
    """Parallel two-stage problem with the moderate-effect planning values."""
    grid = kw.pop("grid", Stage2Grid.parallel(range(5), range(1, 101)))
    density = "noncentral-t" if small_sample else "normal"
    return DesignProblem(ParallelStage1(k1, m1), grid, kw.pop("theta", THETA4), GAUSS, 0.25, rho=30,
                         small_sample=small_sample, stage1_density=density, **kw)


@pytest.fixture(scope="session")
def parallel_cost_rule():
    return calibrate(parallel_problem(), 0.8, "cost-penalised")


@pytest.fixture(scope="session")
def parallel_budget_rule():
    return calibrate(parallel_problem(16, 25), 0.8, "budget-constrained")


@pytest.fixture(scope="session")
def small_rule():
    """A cheap rule on a coarse grid for fast end-to-end tests."""
    grid = Stage2Grid.parallel([0, 2, 4], [10, 30, 60])
    return calibrate(parallel_problem(12, 20, small_sample=False, grid=grid, n_z=41), 0.75, "cost-penalised")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# criterion number -> list of (check, passed, detail); printed after the run
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(ACCEPTANCE):
        checks = ACCEPTANCE[number]
        ok = all(c[1] for c in checks)
        detail = "; ".join(f"{name}: {info}" + ("" if good else " [FAIL]") for name, good, info in checks)
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
