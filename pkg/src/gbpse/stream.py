"""Continuous fused GBP under partial, asynchronous measurement refresh.

Time advances in GBP iterations.  Before every iteration a random subset of
the source measurements is replaced by the active operating condition's
values; every other measurement keeps its old value while its covariance is
inflated by the aging factor.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .engine import GbpSolver, SolverConfig
from .factor_graph import GraphMode, build_graph
from .power_model import generate_measurements, perturb_state, synth_state, to_rectangular

COV_CEILING = 1e250  # stale covariances stop growing here, precisions stop shrinking


@dataclass
class StreamConfig:
    update_fraction: float = 0.6
    aging_factor: float = 1e2
    iterations_per_condition: int = 9
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.update_fraction <= 1:
            raise ValueError("update_fraction must lie in (0, 1]")
        if not self.aging_factor > 1:
            raise ValueError("aging_factor must exceed 1")
        if self.iterations_per_condition < 1:
            raise ValueError("iterations_per_condition must be at least 1")


@dataclass
class Condition:
    truth: np.ndarray
    measurements: list
    polar: list | None = None


def make_schedule(model, pmu, n_conditions, rng=None, voltage_var=(1e-8, 1e-8),
                  current_var=(1e-6, 1e-6), magnitude=0.02, angle=0.05, first=None):
    """Random walk of operating states, each with its own noisy measurement set."""
    rng = np.random.default_rng(rng)
    state = synth_state(model, rng) if first is None else np.asarray(first, dtype=float)
    out = []
    for k in range(n_conditions):
        if k:
            state = perturb_state(state, rng, magnitude, angle)
        polar = generate_measurements(model, state, pmu, voltage_var, current_var, rng)
        out.append(Condition(state, to_rectangular(polar), polar))
    return out


class SourceMap:
    """Where each source measurement lives inside a packed fusion graph."""

    def __init__(self, pg, n_sources):
        self.kind = np.full(n_sources, -1, dtype=np.int64)  # 0 unary, 1 pairwise
        self.index = np.zeros((n_sources, 3), dtype=np.int64)
        for u, src in enumerate(pg.unary_source):
            self.kind[src] = 0
            self.index[src] = (u, 0, 0)
        for b, blk in enumerate(pg.blocks):
            for f in range(blk.n_factors):
                for slot, src in enumerate(blk.sources[f]):
                    self.kind[src] = 1
                    self.index[src] = (b, f, slot)
        if np.any(self.kind < 0):
            raise ValueError("graph does not cover every source measurement")


def _set_source(pg, smap, src, z, sigma):
    if smap.kind[src] == 0:
        u = smap.index[src, 0]
        pg.unary_z[u] = z
        pg.unary_lam[u] = np.linalg.inv(sigma)
    else:
        b, f, slot = smap.index[src]
        rows = slice(2 * slot, 2 * slot + 2)
        pg.blocks[b].z[f, rows] = z
        pg.blocks[b].sigma[f, rows, rows] = sigma


def _age_source(pg, smap, src, factor):
    if smap.kind[src] == 0:
        u = smap.index[src, 0]
        lam = pg.unary_lam[u]
        pg.unary_lam[u] = lam / min(factor, COV_CEILING * np.abs(lam).max())
    else:
        b, f, slot = smap.index[src]
        rows = slice(2 * slot, 2 * slot + 2)
        blk = pg.blocks[b].sigma[f, rows, rows]
        pg.blocks[b].sigma[f, rows, rows] = blk * min(factor, COV_CEILING / np.abs(blk).max())


def step_measurements(solver, smap, measurements, config, rng):
    """Refresh a random subset of sources, age the rest; returns refreshed ids."""
    m = len(measurements)
    n_ref = int(round(config.update_fraction * m))
    refreshed = np.sort(rng.choice(m, size=n_ref, replace=False))
    fresh = np.zeros(m, dtype=bool)
    fresh[refreshed] = True
    pg = solver.pg
    for src in range(m):
        if fresh[src]:
            _set_source(pg, smap, src, measurements[src].z, measurements[src].sigma)
        else:
            _age_source(pg, smap, src, config.aging_factor)
    unary_ref = fresh[pg.unary_source] if len(pg.unary_source) else np.zeros(0, bool)
    solver.refresh_outgoing(pg.unary_var[unary_ref])
    return refreshed


@dataclass
class StreamTrace:
    condition: list = field(default_factory=list)
    refreshed: list = field(default_factory=list)
    means: list = field(default_factory=list)
    truths: list = field(default_factory=list)

    @property
    def n_steps(self):
        return len(self.means)

    def stacked(self):
        return np.array(self.means)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "condition", "bus", "V_mag", "V_angle", "truth_mag", "truth_angle"])
            for step, (c, x) in enumerate(zip(self.condition, self.means)):
                t = self.truths[c]
                mag, ang = np.hypot(x[:, 0], x[:, 1]), np.arctan2(x[:, 1], x[:, 0])
                tm, ta = np.hypot(t[:, 0], t[:, 1]), np.arctan2(t[:, 1], t[:, 0])
                for bus in range(len(x)):
                    w.writerow([step, c, bus, repr(float(mag[bus])), repr(float(ang[bus])),
                                repr(float(tm[bus])), repr(float(ta[bus]))])


def run_stream(model, schedule, config=None, solver_config=None):
    """Drive one continuously running fused GBP instance through ``schedule``."""
    config = config or StreamConfig()
    rng = np.random.default_rng(config.seed)
    graph = build_graph(model, schedule[0].measurements, GraphMode.FUSION)
    solver = GbpSolver(graph, solver_config or SolverConfig())
    smap = SourceMap(solver.pg, len(schedule[0].measurements))
    trace = StreamTrace(truths=[c.truth for c in schedule])
    for c, cond in enumerate(schedule):
        for _ in range(config.iterations_per_condition):
            refreshed = step_measurements(solver, smap, cond.measurements, config, rng)
            solver.step()
            trace.condition.append(c)
            trace.refreshed.append(refreshed)
            trace.means.append(solver.mean.copy())
    return trace
