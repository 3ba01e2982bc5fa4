"""Numba kernels against their numpy twins on synthetic grids.

    python3 benchmarks/bench_kernels.py --sizes 200,800,3200

Prints per-iteration time for both backends and the largest belief
difference between them after a fixed number of rounds.
"""

import argparse
import os
import time

import numpy as np

from gbpse._accel import ENV_FLAG, HAVE_NUMBA
from gbpse.engine import GbpSolver, SolverConfig
from gbpse.factor_graph import build_graph
from gbpse.power_model import (
    add_random_pmus,
    generate_measurements,
    place_pmus_greedy,
    synth_state,
    synthetic_grid,
    to_rectangular,
)


def make_graph(n, mode, seed):
    rng = np.random.default_rng(seed)
    model = synthetic_grid(n, 3.0, rng)
    pmu = add_random_pmus(model, place_pmus_greedy(model), 0.5, rng)
    polar = generate_measurements(model, synth_state(model, rng), pmu, rng=rng)
    return build_graph(model, to_rectangular(polar), mode)


def time_backend(graph, form, iterations, numba_on):
    os.environ[ENV_FLAG] = "0" if numba_on else "1"
    solver = GbpSolver(graph, SolverConfig(form=form))
    solver.step()  # compile / warm up
    t0 = time.perf_counter()
    for _ in range(iterations):
        solver.step()
    return (time.perf_counter() - t0) / iterations, solver.mean


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="200,800,3200")
    ap.add_argument("--mode", default="fusion")
    ap.add_argument("--form", default="canonical")
    ap.add_argument("--iterations", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if not HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    saved = os.environ.get(ENV_FLAG)
    print(f"{'buses':>6} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8} {'max diff':>10}")
    try:
        for n in (int(s) for s in args.sizes.split(",")):
            graph = make_graph(n, args.mode, args.seed)
            t_nb, m_nb = time_backend(graph, args.form, args.iterations, True)
            t_np, m_np = time_backend(graph, args.form, args.iterations, False)
            diff = float(np.max(np.abs(m_nb - m_np)))
            print(f"{n:>6} {t_nb * 1e3:>10.3f} {t_np * 1e3:>10.3f} {t_np / t_nb:>8.2f} {diff:>10.2e}")
    finally:
        if saved is None:
            os.environ.pop(ENV_FLAG, None)
        else:
            os.environ[ENV_FLAG] = saved


if __name__ == "__main__":
    main()
