import csv

import numpy as np
import pytest

from gbpse._accel import ENV_FLAG, HAVE_NUMBA
from gbpse.power_model import (
    add_random_pmus,
    generate_measurements,
    place_pmus_greedy,
    synth_state,
    synthetic_grid,
    three_bus_case,
    three_bus_measurements,
    to_rectangular,
)

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(params=["numba", "numpy"] if HAVE_NUMBA else ["numpy"])
def backend(request, monkeypatch):
    monkeypatch.setenv(ENV_FLAG, "0" if request.param == "numba" else "1")
    return request.param


@pytest.fixture
def three_bus():
    return three_bus_case()


@pytest.fixture
def table_one():
    return to_rectangular(three_bus_measurements())


def synthetic_system(n, seed, p=0.5, voltage_var=(1e-8, 1e-8), current_var=(1e-6, 1e-6),
                     degree=3.0):
    """Seeded grid, greedy plus random PMUs, true state and rectangular measurements."""
    rng = np.random.default_rng(seed)
    model = synthetic_grid(n, degree, rng)
    pmu = add_random_pmus(model, place_pmus_greedy(model), p, rng)
    truth = synth_state(model, rng)
    polar = generate_measurements(model, truth, pmu, voltage_var, current_var, rng)
    return model, pmu, truth, to_rectangular(polar)


def edge_disagreement(a, b):
    """Worst per-edge gap between two message stores, compared in moment form.

    Means are compared by the smaller of the absolute gap and the gap
    measured in standard deviations of the reference message; the latter is
    the only meaningful scale for nearly vacuous messages.  Precisions are
    compared relative to the largest entry of the reference block.
    """
    mean_gap, prec_gap = 0.0, 0.0
    ra, rb = a.moments(), b.moments()
    for k in (0, 2):
        ma, pa, mb, pb = ra[k], ra[k + 1], rb[k], rb[k + 1]
        d = ma - mb
        absolute = np.abs(d).max(axis=1)
        maha = np.sqrt(np.abs(np.einsum("ei,eij,ej->e", d, pa, d)))
        mean_gap = max(mean_gap, float(np.max(np.minimum(absolute, maha), initial=0.0)))
        scale = np.abs(pa).reshape(len(pa), -1).max(axis=1)
        diff = np.abs(pa - pb).reshape(len(pa), -1).max(axis=1)
        rel = np.where(scale > 0, diff / np.where(scale > 0, scale, 1.0), diff)
        prec_gap = max(prec_gap, float(np.max(rel, initial=0.0)))
    return mean_gap, prec_gap


def two_bus_system():
    """Single branch with a PMU at one end: one coupling factor, no feedback loop."""
    from gbpse.power_model import Branch, Bus, BusBranchModel, PmuConfig

    model = BusBranchModel([Bus(0), Bus(1)], [Branch.from_impedance(0, 1, 0.01, 0.1, b_s=0.02)])
    rng = np.random.default_rng(0)
    truth = synth_state(model, rng)
    polar = generate_measurements(model, truth, PmuConfig({0: None}), rng=rng)
    return model, to_rectangular(polar)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
