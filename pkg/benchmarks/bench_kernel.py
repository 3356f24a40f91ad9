"""Time the compiled and numpy trajectory kernels on the emission model.

Usage::

    python3 benchmarks/bench_kernel.py [--trajectories N] [--repeat R]

Both backends run the same seeded ensemble; the script checks that they
agree on every jump and reports trajectories per second.
"""

import argparse
import time

import numpy as np

from ioncav.hilbert import basis_state
from ioncav.model import ExcitationPulse, build_emission_model, default_params
from ioncav.solver import SolverOptions, get_backend, run_trajectories


def bench(backend, model, psi0, opts, repeat):
    best, ens = np.inf, None
    for _ in range(repeat):
        t = time.perf_counter()
        ens = run_trajectories(model, psi0, 300e-9, opts, backend=backend)
        best = min(best, time.perf_counter() - t)
    return best, ens


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trajectories", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    model = build_emission_model(default_params(), pulse=ExcitationPulse(2.7e-9))
    psi0 = basis_state(model.space, "D-3/2")
    opts = SolverOptions(rel_tol=1e-6, abs_tol=1e-8, n_trajectories=args.trajectories,
                         base_seed=7)
    backends = ["python"]
    try:
        get_backend("cython")
        backends.insert(0, "cython")
    except ImportError:
        print("compiled kernel not built; timing the numpy kernel only")

    results = {}
    for name in backends:
        # warm-up outside the timing
        run_trajectories(model, psi0, 300e-9, SolverOptions(n_trajectories=5), backend=name)
        n = args.trajectories if name == "cython" else max(args.trajectories // 10, 50)
        dt, ens = bench(name, model, psi0, SolverOptions(**{**opts.__dict__, "n_trajectories": n}),
                        args.repeat)
        results[name] = (n, dt, ens)
        print(f"{name:>7}: {n} trajectories in {dt:.3f} s "
              f"({n / dt:,.0f} traj/s, {1e6 * dt / n:.1f} us/traj)")

    if len(results) == 2:
        n_py = results["python"][0]
        a, b = results["cython"][2], results["python"][2]
        k = int(a.offsets[n_py])
        same = (np.array_equal(a.jump_channels[:k], b.jump_channels)
                and np.allclose(a.jump_times[:k], b.jump_times, rtol=1e-9, atol=1e-15))
        speedup = (results["python"][1] / n_py) / (results["cython"][1] / results["cython"][0])
        print(f"speedup: {speedup:.1f}x; jump records agree on the shared "
              f"{n_py} trajectories: {same}")


if __name__ == "__main__":
    main()
