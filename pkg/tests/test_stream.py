import numpy as np
import pytest

from gbpse import wls
from gbpse.engine import GbpSolver
from gbpse.factor_graph import GraphMode, build_graph
from gbpse.power_model import add_random_pmus, place_pmus_greedy, synthetic_grid
from gbpse.stream import (
    COV_CEILING,
    SourceMap,
    StreamConfig,
    make_schedule,
    run_stream,
    step_measurements,
)

from conftest import read_csv


@pytest.fixture(scope="module")
def grid():
    rng = np.random.default_rng(3)
    model = synthetic_grid(30, rng=rng)
    pmu = add_random_pmus(model, place_pmus_greedy(model), 0.5, rng)
    return model, pmu, make_schedule(model, pmu, 3, rng)


class TestConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [dict(update_fraction=0.0), dict(update_fraction=1.5), dict(aging_factor=1.0),
         dict(iterations_per_condition=0)],
    )
    def test_validation(self, kwargs):
        with pytest.raises(ValueError):
            StreamConfig(**kwargs)


class TestSchedule:
    def test_conditions_are_nearby(self, grid):
        model, pmu, sched = grid
        assert len(sched) == 3
        for a, b in zip(sched, sched[1:]):
            va, vb = a.truth[:, 0] + 1j * a.truth[:, 1], b.truth[:, 0] + 1j * b.truth[:, 1]
            assert np.all(np.abs(np.abs(va) - np.abs(vb)) <= 0.02 + 1e-12)
            assert len(a.measurements) == len(b.measurements) == len(pmu.resolve(model))


class TestRefresh:
    def test_refresh_and_aging(self, grid):
        model, _, sched = grid
        meas = sched[0].measurements
        solver = GbpSolver(build_graph(model, meas, GraphMode.FUSION))
        pg = solver.pg
        smap = SourceMap(pg, len(meas))
        lam0 = pg.unary_lam.copy()
        sig0 = [b.sigma.copy() for b in pg.blocks]
        cfg = StreamConfig(update_fraction=0.6, aging_factor=10.0)
        fresh = step_measurements(solver, smap, sched[1].measurements, cfg, np.random.default_rng(0))
        assert len(fresh) == round(0.6 * len(meas))
        assert np.all(np.diff(fresh) > 0)
        for u, src in enumerate(pg.unary_source):
            if src in fresh:
                np.testing.assert_allclose(pg.unary_z[u], sched[1].measurements[src].z)
            else:
                np.testing.assert_allclose(pg.unary_lam[u], lam0[u] / 10.0)
        for b, blk in enumerate(pg.blocks):
            for f in range(blk.n_factors):
                for slot, src in enumerate(blk.sources[f]):
                    rows = slice(2 * slot, 2 * slot + 2)
                    want = sched[1].measurements[src].sigma if src in fresh else sig0[b][f, rows, rows] * 10
                    np.testing.assert_allclose(blk.sigma[f, rows, rows], want, rtol=1e-14)

    def test_covariance_ceiling(self, grid):
        model, _, sched = grid
        meas = sched[0].measurements
        solver = GbpSolver(build_graph(model, meas, GraphMode.FUSION))
        smap = SourceMap(solver.pg, len(meas))
        cfg = StreamConfig(update_fraction=1 / len(meas), aging_factor=1e100)
        rng = np.random.default_rng(1)
        for _ in range(6):
            step_measurements(solver, smap, meas, cfg, rng)
        for blk in solver.pg.blocks:
            assert np.all(np.isfinite(blk.sigma))
            assert np.abs(blk.sigma).max() <= COV_CEILING * (1 + 1e-12)
        lam = solver.pg.unary_lam
        assert np.all(np.abs(lam).max(axis=(1, 2)) >= (1 - 1e-12) / COV_CEILING)


class TestRunStream:
    def test_full_refresh_converges_to_batch_wls(self, grid):
        model, _, sched = grid
        ipc = 150
        trace = run_stream(model, sched, StreamConfig(update_fraction=1.0, iterations_per_condition=ipc))
        X = trace.stacked()
        for c, cond in enumerate(sched):
            ref = wls.solve(wls.assemble(model, cond.measurements))
            np.testing.assert_allclose(X[(c + 1) * ipc - 1], ref, atol=1e-10)

    def test_seeded(self, grid):
        model, _, sched = grid
        a = run_stream(model, sched, StreamConfig(seed=4))
        b = run_stream(model, sched, StreamConfig(seed=4))
        np.testing.assert_array_equal(a.stacked(), b.stacked())
        assert a.condition == [c for c in range(3) for _ in range(9)]

    def test_csv(self, grid, tmp_path):
        model, _, sched = grid
        trace = run_stream(model, sched[:1], StreamConfig(iterations_per_condition=2))
        path = tmp_path / "stream.csv"
        trace.to_csv(path)
        rows = read_csv(path)
        assert list(rows[0]) == ["step", "condition", "bus", "V_mag", "V_angle", "truth_mag",
                                 "truth_angle"]
        assert len(rows) == 2 * model.n_buses
        t = sched[0].truth[5]
        assert float(rows[5]["truth_mag"]) == pytest.approx(np.hypot(*t))
