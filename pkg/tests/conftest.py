import numpy as np
import pytest

from ioncav.hilbert import basis_state
from ioncav.model import ExcitationPulse, build_emission_model, default_params
from ioncav.solver import SolverOptions, run_trajectories

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
CRITERIA: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def record_criterion():
    def record(n, ok, detail):
        CRITERIA[n] = (bool(ok), detail)
        assert ok, f"criterion {n}: {detail}"
    return record


@pytest.fixture(scope="session")
def params():
    return default_params()


@pytest.fixture(scope="session")
def emission_model(params):
    return build_emission_model(params, pulse=ExcitationPulse(2.7e-9))


@pytest.fixture(scope="session")
def ensemble_a(emission_model):
    """Default emission model, perfect preparation, 2e5 cycles of 300 ns."""
    opts = SolverOptions(rel_tol=1e-6, abs_tol=1e-8, n_trajectories=200_000, base_seed=1)
    return run_trajectories(emission_model, basis_state(emission_model.space, "D-3/2"),
                            300e-9, opts)


@pytest.fixture(scope="session")
def small_ensemble(emission_model):
    opts = SolverOptions(rel_tol=1e-6, abs_tol=1e-8, n_trajectories=20_000, base_seed=5)
    return run_trajectories(emission_model, basis_state(emission_model.space, "D-3/2"),
                            300e-9, opts)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
