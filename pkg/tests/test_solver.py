import math
import os
import subprocess
import sys

import numpy as np
import pytest

from ioncav import solver
from ioncav._kernel_py import IntegrationError
from ioncav.hilbert import (ConfigurationError, PLUS, annihilation, atomic_projector,
                            basis_state, build_space, ket_to_dm, number)
from ioncav.model import (LindbladModel, is_cavity_tag, mhz, default_params,
                          build_emission_model, ExcitationPulse)
from ioncav.solver import (ConvergenceError, SolverOptions, evolve_master, get_backend,
                           liouvillian, run_trajectories, stationary_state, trajectory_seed)


def _decaying_cavity(kappa=1.0, n_max=3):
    space = build_space(("g",), n_max)
    a = annihilation(space, PLUS)
    return LindbladModel(space, np.zeros((space.dim, space.dim)),
                         ((math.sqrt(2 * kappa) * a, "leak"),))


def test_liouvillian_preserves_trace():
    model = _decaying_cavity()
    lv = liouvillian(model)
    d = model.space.dim
    trace_row = np.eye(d).reshape(-1)
    assert np.allclose(trace_row @ lv.toarray(), 0.0)


def test_cavity_decay_oracle():
    model = _decaying_cavity(kappa=2.0)
    psi = basis_state(model.space, "g", 2, 0)
    ts = np.linspace(0, 2.0, 21)
    rhos = evolve_master(model, ket_to_dm(psi), ts, SolverOptions(rel_tol=1e-11, abs_tol=1e-13))
    n = [np.trace(number(model.space, PLUS) @ r).real for r in rhos]
    assert np.allclose(n, 2 * np.exp(-4.0 * ts), atol=1e-9)


def test_driven_damped_cavity_stationary_state():
    space = build_space(("g",), 6)
    a = annihilation(space, PLUS)
    kappa, eta = 1.0, 0.3
    model = LindbladModel(space, eta * (a + a.conj().T), ((math.sqrt(2 * kappa) * a, "leak"),))
    rho = stationary_state(model, SolverOptions(abs_tol=1e-12))
    assert np.trace(number(space, PLUS) @ rho).real == pytest.approx((eta / kappa) ** 2, rel=1e-4)


def test_stationary_state_needs_rho0_when_not_unique():
    space = build_space(("a", "b"), 0)
    model = LindbladModel(space, np.zeros((2, 2)), ())
    with pytest.raises(ConvergenceError):
        stationary_state(model)
    rho0 = ket_to_dm(basis_state(space, "a"))
    assert np.allclose(stationary_state(model, rho0=rho0), rho0)


def test_bad_grid_rejected():
    model = _decaying_cavity()
    rho0 = ket_to_dm(basis_state(model.space, "g"))
    with pytest.raises(ValueError):
        evolve_master(model, rho0, [0.0, 1.0, 0.5])
    with pytest.raises(ValueError):
        evolve_master(model, np.eye(2), [0.0, 1.0])


def test_integration_error_carries_time(monkeypatch):
    model = _decaying_cavity()
    rho0 = ket_to_dm(basis_state(model.space, "g", 1, 0))

    class Failed:
        status, message, t = -1, "step size too small", np.array([0.0, 0.25])
        y = np.zeros((model.space.dim ** 2, 2))

    monkeypatch.setattr(solver, "solve_ivp", lambda *a, **k: Failed())
    with pytest.raises(IntegrationError) as exc:
        evolve_master(model, rho0, [0.0, 1.0])
    assert exc.value.last_time == 0.25


def test_bdf_matches_rk45(emission_model):
    model = build_emission_model(default_params())
    rho0 = ket_to_dm(basis_state(model.space, "E-1/2"))
    ts = [0.0, 50e-9, 200e-9]
    a = evolve_master(model, rho0, ts, SolverOptions(rel_tol=1e-9, abs_tol=1e-12))
    b = evolve_master(model, rho0, ts, SolverOptions(rel_tol=1e-9, abs_tol=1e-12, method="BDF"))
    assert np.allclose(a[-1], b[-1], atol=1e-7)


def test_options_validation():
    with pytest.raises(ValueError):
        SolverOptions(rel_tol=0)
    with pytest.raises(ValueError):
        SolverOptions(n_workers=0)


def test_trajectory_seeds_are_distinct_and_stable():
    seeds = {trajectory_seed(3, i) for i in range(1000)}
    assert len(seeds) == 1000
    assert trajectory_seed(3, 7) == trajectory_seed(3, 7)
    assert trajectory_seed(3, 7) != trajectory_seed(4, 7)


def _opts(n, seed=9, workers=1):
    return SolverOptions(rel_tol=1e-6, abs_tol=1e-8, n_trajectories=n, base_seed=seed,
                         n_workers=workers)


def test_determinism_across_workers(emission_model):
    psi = basis_state(emission_model.space, "D-3/2")
    a = run_trajectories(emission_model, psi, 300e-9, _opts(400))
    b = run_trajectories(emission_model, psi, 300e-9, _opts(400, workers=2))
    assert np.array_equal(a.offsets, b.offsets)
    assert np.array_equal(a.jump_times, b.jump_times)
    assert np.array_equal(a.final_atom, b.final_atom)


def test_start_index_continues_the_ensemble(emission_model):
    psi = basis_state(emission_model.space, "D-3/2")
    full = run_trajectories(emission_model, psi, 300e-9, _opts(60))
    tail = run_trajectories(emission_model, psi, 300e-9, _opts(30), start_index=30)
    assert [r.jumps for r in full[30:]] == [r.jumps for r in tail]


def test_backends_agree(emission_model):
    try:
        get_backend("cython")
    except ImportError:
        pytest.skip("compiled kernel not built")
    psi = basis_state(emission_model.space, "D-3/2")
    a = run_trajectories(emission_model, psi, 300e-9, _opts(100), backend="cython")
    b = run_trajectories(emission_model, psi, 300e-9, _opts(100), backend="python")
    assert np.array_equal(a.jump_channels, b.jump_channels)
    assert np.allclose(a.jump_times, b.jump_times, rtol=1e-9, atol=1e-15)
    assert np.array_equal(a.final_atom, b.final_atom)


def test_pure_python_fallback_selected_by_env():
    env = dict(os.environ, IONCAV_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import ioncav.solver as s; print(s.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_unknown_backend():
    with pytest.raises(ValueError):
        get_backend("fortran")


def test_no_cavity_jumps_without_coupling():
    model = build_emission_model(default_params(g_bar=0.0), pulse=ExcitationPulse(2.7e-9))
    ens = run_trajectories(model, basis_state(model.space, "D-3/2"), 300e-9, _opts(300))
    assert not ens.channel_mask(is_cavity_tag).any()
    assert len(ens.jump_times) > 0


def test_jump_records_are_ordered(small_ensemble):
    for i in range(0, len(small_ensemble), 997):
        times = [t for t, _ in small_ensemble[i].jumps]
        assert times == sorted(times)
        assert all(0.0 <= t <= 300e-9 for t in times)
    # after 300 ns (8.5 lifetimes) almost every ion has left E
    excited = np.isin(small_ensemble.final_atom, (4, 5)).mean()
    assert excited < 1e-3


def test_mixed_initial_state(emission_model):
    sp = emission_model.space
    psi0 = [(0.5, basis_state(sp, "D-3/2")), (0.5, basis_state(sp, "D+3/2"))]
    ens = run_trajectories(emission_model, psi0, 300e-9, _opts(400))
    # the pulse only addresses D-3/2; the other half never jumps
    no_jump = np.diff(ens.offsets) == 0
    assert 0.35 < no_jump.mean() < 0.65


def test_sampled_populations_are_normalized(emission_model):
    ens = run_trajectories(emission_model, basis_state(emission_model.space, "D-3/2"), 100e-9,
                           _opts(50), sample_times=[0.0, 10e-9, 100e-9])
    assert ens.samples.shape == (50, 3, 7)
    assert np.allclose(ens.samples.sum(axis=2), 1.0, atol=1e-6)


def test_sample_times_validated(emission_model):
    with pytest.raises(ValueError):
        run_trajectories(emission_model, basis_state(emission_model.space, "D-3/2"), 100e-9,
                         _opts(2), sample_times=[50e-9, 10e-9])


def test_hermiticity_checked_before_solving():
    space = build_space(("g", "e"), 0)
    with pytest.raises(ConfigurationError):
        LindbladModel(space, atomic_projector(space, "g", "e"), ())
