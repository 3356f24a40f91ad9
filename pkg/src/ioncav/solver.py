"""Lindblad master-equation integration and quantum-trajectory unraveling.

The trajectory kernel is compiled (``ioncav._kernel``) when available and
falls back to the numpy implementation otherwise; set
``IONCAV_PURE_PYTHON=1`` to force the fallback.  Both backends consume the
per-trajectory uniform stream identically.
"""

from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.integrate import solve_ivp
from scipy.sparse.linalg import spsolve

from . import _kernel_py
from ._kernel_py import IntegrationError
from .model import LindbladModel

try:
    if os.environ.get("IONCAV_PURE_PYTHON"):
        raise ImportError("pure-python backend requested")
    from . import _kernel as _compiled
except ImportError:
    _compiled = None

BACKEND = "cython" if _compiled is not None else "python"


def get_backend(name: str | None = None):
    """Return the kernel module for ``name`` ("cython", "python" or default)."""
    name = name or BACKEND
    if name == "python":
        return _kernel_py
    if name == "cython":
        if _compiled is None:
            raise ImportError("compiled kernel is not available")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class SolverOptions:
    rel_tol: float = 1e-8
    abs_tol: float = 1e-10
    max_step: float = math.inf
    n_trajectories: int = 1000
    base_seed: int = 0
    n_workers: int = 1
    jump_time_tol: float | None = None
    max_iterations: int = 200
    method: str = "RK45"

    def __post_init__(self):
        if self.rel_tol <= 0 or self.abs_tol <= 0:
            raise ValueError("tolerances must be > 0")
        if self.n_trajectories < 0:
            raise ValueError("n_trajectories must be >= 0")
        if self.n_workers < 1:
            raise ValueError("n_workers must be >= 1")


# --------------------------------------------------------------------------
# master equation

def _spre(a):
    return sp.kron(a, sp.identity(a.shape[0]), format="csr")


def _spost(a):
    # row-major vec: vec(rho A) = (I kron A^T) vec(rho)
    return sp.kron(sp.identity(a.shape[0]), a.T, format="csr")


def hamiltonian_superop(h: np.ndarray) -> sp.csr_matrix:
    h = sp.csr_matrix(h)
    return (-1j * (_spre(h) - _spost(h))).tocsr()


def liouvillian(model: LindbladModel) -> sp.csr_matrix:
    """Superoperator of the time-independent part, acting on row-major ``vec(rho)``."""
    lv = hamiltonian_superop(model.hamiltonian)
    for op in model.operators:
        c = sp.csr_matrix(op)
        cdc = (c.conj().T @ c).tocsr()
        lv = lv + sp.kron(c, c.conj(), format="csr") - 0.5 * (_spre(cdc) + _spost(cdc))
    return lv.tocsr()


# implicit methods that accept complex states; the Liouvillian is their Jacobian
_IMPLICIT = ("BDF",)


def _segments(t_grid, breakpoints):
    inner = [b for b in breakpoints if t_grid[0] < b < t_grid[-1]]
    edges = [t_grid[0], *inner, t_grid[-1]]
    return list(zip(edges[:-1], edges[1:]))


def evolve_master(model: LindbladModel, rho0: np.ndarray, t_grid: Sequence[float],
                  options: SolverOptions | None = None) -> list[np.ndarray]:
    """Integrate the master equation, returning ``rho`` at each time in ``t_grid``.

    Uses ``solve_ivp`` with ``options.method``: adaptive Dormand-Prince 5(4)
    by default, or BDF with the Liouvillian as Jacobian for stiff runs.
    Piecewise-constant (window) terms are integrated segment by segment so
    no step straddles a switching time.

    Raises
    ------
    IntegrationError
        If the integrator fails; carries the last successfully reached time.
    """
    options = options or SolverOptions()
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.ndim != 1 or len(t_grid) == 0 or np.any(np.diff(t_grid) <= 0):
        raise ValueError("t_grid must be strictly increasing")
    d = model.space.dim
    if rho0.shape != (d, d):
        raise ValueError("rho0 does not match the model space")
    l0 = liouvillian(model)
    window_terms = [(hamiltonian_superop(tt.operator), tt) for tt in model.time_terms
                    if tt.kind == "window"]
    cos_terms = [(hamiltonian_superop(tt.operator), tt) for tt in model.time_terms
                 if tt.kind == "cos"]
    max_step = min(options.max_step, model.max_step)

    out: list[np.ndarray | None] = [None] * len(t_grid)
    y = np.asarray(rho0, dtype=complex).reshape(-1).copy()
    if len(t_grid) == 1:
        return [y.reshape(d, d)]
    out[0] = y.reshape(d, d).copy()
    for t_a, t_b in _segments(t_grid, model.breakpoints):
        t_mid = 0.5 * (t_a + t_b)
        lseg = l0
        for sup, tt in window_terms:
            if tt.coefficient(t_mid):
                lseg = lseg + sup
        lseg = lseg.tocsr()

        if cos_terms:
            def rhs(t, v, lseg=lseg):
                r = lseg @ v
                for sup, tt in cos_terms:
                    r = r + tt.coefficient(t) * (sup @ v)
                return r
        else:
            def rhs(t, v, lseg=lseg):
                return lseg @ v

        mask = (t_grid > t_a) & (t_grid <= t_b)
        t_eval = np.union1d(t_grid[mask], [t_b])
        extra = {}
        if options.method in _IMPLICIT and not cos_terms:
            extra["jac"] = lseg
        sol = solve_ivp(rhs, (t_a, t_b), y, method=options.method, t_eval=t_eval,
                        rtol=options.rel_tol, atol=options.abs_tol, max_step=max_step,
                        **extra)
        if sol.status != 0:
            last = float(sol.t[-1]) if len(sol.t) else t_a
            raise IntegrationError(sol.message, last)
        pos = np.searchsorted(t_eval, t_grid[mask])
        for idx, k in zip(np.flatnonzero(mask), pos):
            out[idx] = sol.y[:, k].reshape(d, d)
        y = sol.y[:, -1].copy()
    return out


def stationary_state(model: LindbladModel, options: SolverOptions | None = None,
                     rho0: np.ndarray | None = None, tol: float | None = None) -> np.ndarray:
    """Steady state with ``||L rho|| / ||L|| < tol`` (default ``options.abs_tol``).

    Without ``rho0`` the unique null vector of the Liouvillian is solved for
    directly.  With ``rho0`` (needed when the steady state is not unique,
    e.g. dark atomic sublevels) the state is propagated until stationary.
    """
    options = options or SolverOptions()
    if model.is_time_dependent:
        raise ValueError("stationary_state needs a time-independent model")
    tol = options.abs_tol if tol is None else tol
    d = model.space.dim
    lv = liouvillian(model)
    scale = sp.linalg.norm(lv, 1) or 1.0

    def residual(rho):
        return np.linalg.norm(lv @ rho.reshape(-1)) / scale

    if rho0 is None:
        trace_row = sp.csr_matrix((np.ones(d), (np.zeros(d, int), np.arange(d) * (d + 1))),
                                  shape=(1, d * d))
        a = sp.vstack([trace_row, lv[1:]]).tocsc()
        b = np.zeros(d * d, dtype=complex)
        b[0] = 1.0
        with np.errstate(all="ignore"), warnings.catch_warnings():
            warnings.simplefilter("ignore")
            x = spsolve(a, b)
        rho = x.reshape(d, d)
        if np.all(np.isfinite(rho)) and residual(rho) < tol:
            return 0.5 * (rho + rho.conj().T)
        raise ConvergenceError("steady state is not unique or not found; pass rho0")

    rho = np.asarray(rho0, dtype=complex)
    shortest = model.shortest_decay_time()
    chunk = 10.0 * (shortest if math.isfinite(shortest) else 1.0)
    t = 0.0
    for _ in range(options.max_iterations):
        if residual(rho) < tol:
            return rho
        rho = evolve_master(model, rho, [t, t + chunk], options)[-1]
        t += chunk
        chunk *= 1.5
    raise ConvergenceError(f"no stationary state within {options.max_iterations} iterations")


# --------------------------------------------------------------------------
# quantum trajectories

def _csr_arrays(m):
    m = sp.csr_matrix(m)
    m.sort_indices()
    return (np.ascontiguousarray(m.data, dtype=complex),
            np.ascontiguousarray(m.indices, dtype=np.int32),
            np.ascontiguousarray(m.indptr, dtype=np.int32))


@dataclass
class KernelSystem:
    """Operators of a model laid out for the trajectory kernels.

    Holds ``-i H_eff`` and ``-i H_j`` for the time-dependent terms, both
    as CSR triples (compiled kernel) and dense arrays (numpy kernel).
    """

    dim: int
    n_td: int
    n_ch: int
    a0_dense: np.ndarray
    td_dense: np.ndarray
    jumps_dense: np.ndarray
    td_kind: np.ndarray
    td_params: np.ndarray
    breakpoints: list
    a0_csr: tuple = field(init=False)
    td_csr: tuple = field(init=False)
    jumps_csr: tuple = field(init=False)

    def __post_init__(self):
        self.a0_csr = _csr_arrays(self.a0_dense)
        stack = (self.td_dense.reshape(-1, self.dim) if self.n_td
                 else np.zeros((1, self.dim), dtype=complex))
        self.td_csr = _csr_arrays(stack)
        jstack = (self.jumps_dense.reshape(-1, self.dim) if self.n_ch
                  else np.zeros((1, self.dim), dtype=complex))
        self.jumps_csr = _csr_arrays(jstack)

    @classmethod
    def from_model(cls, model: LindbladModel) -> "KernelSystem":
        d = model.space.dim
        a0 = -1j * model.effective_hamiltonian()
        terms = model.time_terms
        td = np.array([-1j * tt.operator for tt in terms], dtype=complex).reshape(len(terms), d, d)
        kinds = np.array([0 if tt.kind == "window" else 1 for tt in terms], dtype=np.int32)
        params = np.zeros((max(len(terms), 1), 3))
        for j, tt in enumerate(terms):
            params[j, :len(tt.params)] = tt.params
        jumps = np.array(model.operators, dtype=complex).reshape(len(model.operators), d, d)
        return cls(d, len(terms), len(model.operators), a0, td, jumps, kinds,
                   params, list(model.breakpoints))


@dataclass(frozen=True)
class TrajectoryRecord:
    seed: int
    jumps: tuple
    final_atom_state: str
    index: int = 0


def trajectory_seed(base_seed: int, index: int) -> int:
    """Deterministic 64-bit seed of trajectory ``index``."""
    ss = np.random.SeedSequence(entropy=int(base_seed), spawn_key=(int(index),))
    hi, lo = ss.generate_state(2, np.uint32)
    return (int(hi) << 32) | int(lo)


class TrajectoryEnsemble(Sequence):
    """Columnar store of trajectory records, indexable as ``TrajectoryRecord``.

    Attributes
    ----------
    seeds : (n,) uint64
    offsets : (n + 1,) int64, jumps of trajectory ``i`` are ``offsets[i]:offsets[i+1]``
    jump_times, jump_channels : flat arrays over all jumps
    final_atom : (n,) int, index into ``atom_labels``
    samples : (n, n_times, n_obs) or None
    """

    def __init__(self, tags, atom_labels, t_end, seeds, offsets, jump_times, jump_channels,
                 final_atom, sample_times=None, samples=None):
        self.tags = list(tags)
        self.atom_labels = list(atom_labels)
        self.t_end = t_end
        self.seeds = np.asarray(seeds, dtype=np.uint64)
        self.offsets = np.asarray(offsets, dtype=np.int64)
        self.jump_times = np.asarray(jump_times, dtype=float)
        self.jump_channels = np.asarray(jump_channels, dtype=np.int64)
        self.final_atom = np.asarray(final_atom, dtype=np.int64)
        self.sample_times = None if sample_times is None else np.asarray(sample_times)
        self.samples = samples

    def __len__(self) -> int:
        return len(self.seeds)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        if i < 0:
            i += len(self)
        a, b = self.offsets[i], self.offsets[i + 1]
        jumps = tuple((float(t), self.tags[c])
                      for t, c in zip(self.jump_times[a:b], self.jump_channels[a:b]))
        return TrajectoryRecord(int(self.seeds[i]), jumps, self.atom_labels[self.final_atom[i]], i)

    def __iter__(self) -> Iterator[TrajectoryRecord]:
        for i in range(len(self)):
            yield self[i]

    @property
    def jump_owner(self) -> np.ndarray:
        """Trajectory index of every entry of ``jump_times``."""
        return np.repeat(np.arange(len(self)), np.diff(self.offsets))

    def channel_mask(self, predicate) -> np.ndarray:
        ok = np.array([bool(predicate(t)) for t in self.tags] + [False])
        return ok[self.jump_channels] if len(self.jump_channels) else np.zeros(0, bool)

    @classmethod
    def concatenate(cls, parts: list["TrajectoryEnsemble"]) -> "TrajectoryEnsemble":
        first = parts[0]
        offsets = [np.zeros(1, np.int64)]
        base = 0
        for p in parts:
            offsets.append(p.offsets[1:] + base)
            base += p.offsets[-1]
        samples = None
        if first.samples is not None:
            samples = np.concatenate([p.samples for p in parts], axis=0)
        return cls(first.tags, first.atom_labels, first.t_end,
                   np.concatenate([p.seeds for p in parts]), np.concatenate(offsets),
                   np.concatenate([p.jump_times for p in parts]),
                   np.concatenate([p.jump_channels for p in parts]),
                   np.concatenate([p.final_atom for p in parts]),
                   first.sample_times, samples)


def _initial_states(psi0, dim):
    if isinstance(psi0, np.ndarray) and psi0.ndim == 1:
        states = [(1.0, psi0)]
    else:
        states = [(float(p), np.asarray(s, dtype=complex)) for p, s in psi0]
    probs = np.array([p for p, _ in states])
    if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
        raise ValueError("initial-state probabilities must be >= 0 and sum to 1")
    for _, s in states:
        if s.shape != (dim,):
            raise ValueError("initial state does not match the model space")
        if abs(np.linalg.norm(s) - 1.0) > 1e-10:
            raise ValueError("initial state is not normalized")
    return np.cumsum(probs), [s for _, s in states]


def _run_chunk(system, atom_weights, tags, atom_labels, cum, states, t0, t_end, indices,
               base_seed, sample_times, obs_weights, rtol, atol, max_step, jump_tol, backend):
    kernel = get_backend(backend)
    seeds, offsets, times, chans, finals, samples = [], [0], [], [], [], []
    for idx in indices:
        seed = trajectory_seed(base_seed, idx)
        rng = np.random.Generator(np.random.PCG64(seed))
        k = 0 if len(states) == 1 else int(np.searchsorted(cum, rng.random() * cum[-1], "right"))
        psi0 = states[min(k, len(states) - 1)]
        jt, jc, samp, psi = kernel.simulate(system, psi0, t0, t_end, rng.random, sample_times,
                                            obs_weights, rtol, atol, max_step, jump_tol)
        p = atom_weights @ (psi.real ** 2 + psi.imag ** 2)
        cum_p = np.cumsum(p)
        final = int(np.searchsorted(cum_p, rng.random() * cum_p[-1], "right"))
        seeds.append(seed)
        times.extend(jt)
        chans.extend(jc)
        offsets.append(offsets[-1] + len(jt))
        finals.append(min(final, len(atom_labels) - 1))
        if len(sample_times):
            samples.append(samp)
    samp_arr = np.array(samples) if len(sample_times) else None
    return TrajectoryEnsemble(tags, atom_labels, t_end, seeds, offsets, times, chans, finals,
                              sample_times if len(sample_times) else None, samp_arr)


def run_trajectories(model: LindbladModel, psi0, t_end: float,
                     options: SolverOptions | None = None, *, t0: float = 0.0,
                     sample_times: Sequence[float] | None = None,
                     observables: np.ndarray | None = None,
                     backend: str | None = None, start_index: int = 0) -> TrajectoryEnsemble:
    """Monte-Carlo wave-function unraveling of ``model``.

    ``psi0`` is a normalized state vector or a list of ``(probability, state)``
    pairs; each trajectory draws its initial state from its own stream.
    Trajectory ``i`` is seeded from ``(options.base_seed, i)`` only, so the
    ensemble is identical for any ``options.n_workers``.

    ``sample_times``/``observables`` record normalized diagonal observables
    (default: atomic level populations) along every trajectory; the
    ensemble average reproduces the master-equation expectation values.
    """
    options = options or SolverOptions()
    system = KernelSystem.from_model(model)
    cum, states = _initial_states(psi0, system.dim)
    atom_w = model.space.atom_weights()
    obs = atom_w if observables is None else np.atleast_2d(np.asarray(observables, float))
    st = np.asarray([] if sample_times is None else sample_times, dtype=float)
    if len(st) and (np.any(np.diff(st) < 0) or st[0] < t0 or st[-1] > t_end):
        raise ValueError("sample_times must be sorted and inside [t0, t_end]")
    max_step = min(options.max_step, model.max_step)
    jump_tol = options.jump_time_tol
    if jump_tol is None:
        shortest = model.shortest_decay_time()
        jump_tol = 1e-3 * (shortest if math.isfinite(shortest) else (t_end - t0))
    backend = backend or BACKEND
    n = options.n_trajectories
    indices = np.arange(start_index, start_index + n)
    args = (system, atom_w, model.tags, model.space.atom_labels, cum, states, t0, t_end)
    tail = (options.base_seed, st, obs, options.rel_tol, options.abs_tol, max_step,
            jump_tol, backend)
    if options.n_workers == 1 or n < 2:
        return _run_chunk(*args, indices, *tail)
    chunks = [c for c in np.array_split(indices, options.n_workers * 4) if len(c)]
    with ProcessPoolExecutor(max_workers=options.n_workers) as pool:
        parts = list(pool.map(_run_chunk_star, [(args, c, tail) for c in chunks]))
    return TrajectoryEnsemble.concatenate(parts)


def _run_chunk_star(packed):
    args, chunk, tail = packed
    return _run_chunk(*args, chunk, *tail)


__all__ = [
    "BACKEND", "get_backend", "IntegrationError", "ConvergenceError", "SolverOptions",
    "liouvillian", "evolve_master", "stationary_state", "KernelSystem", "TrajectoryRecord",
    "TrajectoryEnsemble", "trajectory_seed", "run_trajectories",
]
