import json

import numpy as np
import pytest

from gbpse import wls
from gbpse.errors import EmptyMeasurementSet, MixedPairs, UnknownEndpoint
from gbpse.factor_graph import (
    GraphMode,
    PairwiseFactor,
    build_graph,
    fuse_pairwise,
    graph_stats,
    initialize_messages,
)
from gbpse.messages import CANONICAL, MOMENT
from gbpse.power_model import (
    Channel,
    PmuConfig,
    PolarPhasor,
    current_coefficients,
    generate_measurements,
    polar_to_rectangular,
    to_rectangular,
)

from conftest import synthetic_system


class TestExampleGraph:
    @pytest.mark.parametrize(
        "mode,expected",
        [
            (GraphMode.SCALAR, (6, 12, 32)),
            (GraphMode.MULTIVARIATE, (3, 6, 8)),
            (GraphMode.FUSION, (3, 5, 6)),
        ],
    )
    def test_graph_sizes(self, three_bus, table_one, mode, expected):
        stats = graph_stats(build_graph(three_bus, table_one, mode))
        assert (stats["variable_nodes"], stats["factor_nodes"], stats["pairwise_edges"]) == expected

    def test_unary_ids_precede_pairwise(self, three_bus, table_one):
        g = build_graph(three_bus, table_one, GraphMode.MULTIVARIATE)
        assert [u.id for u in g.unary] == [0, 1]
        assert [f.id for f in g.pairwise] == [2, 3, 4, 5]
        assert g.variables[2].unary == ()

    def test_fusion_stacks_both_currents_of_branch_zero(self, three_bus, table_one):
        g = build_graph(three_bus, table_one, GraphMode.FUSION)
        fused = [f for f in g.pairwise if f.variables == (0, 1)]
        assert len(fused) == 1
        f = fused[0]
        assert f.d == 2 and f.sources == (2, 4)
        assert f.sigma.shape == (4, 4)
        np.testing.assert_array_equal(f.sigma[:2, 2:], 0.0)
        np.testing.assert_allclose(f.z, np.concatenate([table_one[2].z, table_one[4].z]))

    def test_scalar_factor_rows(self, three_bus, table_one):
        g = build_graph(three_bus, table_one, GraphMode.SCALAR)
        f = g.pairwise[0]
        assert f.variables == (0, 1, 2, 3)
        H = np.hstack(f.H)
        Hi, Hj = current_coefficients(three_bus.branches[0], table_one[2].channel.direction)
        np.testing.assert_allclose(H, np.hstack([Hi, Hj])[:1])
        assert f.sigma[0, 0] == pytest.approx(table_one[2].sigma[0, 0])

    def test_diagonal_covariance_drops_cross_terms(self, three_bus, table_one):
        g = build_graph(three_bus, table_one, GraphMode.MULTIVARIATE, diagonal_covariance=True)
        for f in g.pairwise:
            assert f.sigma[0, 1] == 0.0
        lam = g.unary[0].lam
        np.testing.assert_allclose(lam, np.diag(1 / np.diag(table_one[0].sigma)))

    def test_json_dump(self, three_bus, table_one):
        g = build_graph(three_bus, table_one, GraphMode.FUSION)
        data = json.loads(g.to_json())
        assert data["mode"] == "fusion"
        assert len(data["edges"]) == 6
        assert data["pairwise"][0]["sources"] == [2, 4]


class TestFusion:
    def _factor(self, fid, variables, seed):
        rng = np.random.default_rng(seed)
        return PairwiseFactor(fid, variables, rng.normal(size=2), np.eye(2) * (seed + 1),
                              (rng.normal(size=(2, 2)), rng.normal(size=(2, 2))), (seed,))

    def test_fused_likelihood_is_product(self):
        """Stacked factor log-likelihood equals the sum of its parts."""
        a, b = self._factor(0, (0, 1), 1), self._factor(1, (1, 0), 2)
        f = fuse_pairwise([a, b], new_id=9)
        assert f.id == 9 and f.variables == (0, 1)
        x = np.random.default_rng(0).normal(size=(2, 2))

        def nll(fac):
            xs = {v: x[v] for v in fac.variables}
            r = fac.z - sum(H @ xs[v] for H, v in zip(fac.H, fac.variables))
            return r @ np.linalg.solve(fac.sigma, r)

        assert nll(f) == pytest.approx(nll(a) + nll(b), rel=1e-12)

    def test_mixed_pairs_rejected(self):
        with pytest.raises(MixedPairs):
            fuse_pairwise([self._factor(0, (0, 1), 1), self._factor(1, (1, 2), 2)])

    def test_single_factor_passthrough(self):
        f = self._factor(3, (2, 1), 0)
        out = fuse_pairwise([f])
        assert out.variables == (1, 2)
        np.testing.assert_array_equal(out.H[0], f.H[1])


class TestGraphErrors:
    def test_empty(self, three_bus):
        with pytest.raises(EmptyMeasurementSet):
            build_graph(three_bus, [])

    def test_unknown_endpoint(self, three_bus):
        m = polar_to_rectangular(PolarPhasor(Channel.current(5, "from_to"), 1, 0, 1e-6, 1e-4))
        with pytest.raises(UnknownEndpoint):
            build_graph(three_bus, [m])


class TestPacking:
    @pytest.mark.parametrize("mode", list(GraphMode))
    def test_packed_adjacency(self, mode):
        model, _, _, meas = synthetic_system(40, 3)
        g = build_graph(model, meas, mode)
        pg = g.packed
        assert pg.n_edges == graph_stats(g)["pairwise_edges"]
        counts = np.bincount(pg.edge_var, minlength=pg.n_var)
        np.testing.assert_array_equal(np.diff(pg.var_ptr), counts)
        for v in range(pg.n_var):
            edges = pg.var_edges[pg.var_ptr[v]: pg.var_ptr[v + 1]]
            assert np.all(pg.edge_var[edges] == v)

    def test_partner_is_involution(self):
        model, _, _, meas = synthetic_system(30, 0)
        pg = build_graph(model, meas, GraphMode.FUSION).packed
        p = pg.partner()
        np.testing.assert_array_equal(p[p], np.arange(pg.n_edges))
        assert np.all(pg.edge_var[p] != pg.edge_var)

    def test_unary_aggregate(self, three_bus, table_one):
        g = build_graph(three_bus, table_one, GraphMode.MULTIVARIATE)
        lam, eta = g.packed.unary_aggregate()
        np.testing.assert_allclose(lam[0], g.unary[0].lam)
        np.testing.assert_allclose(eta[1], g.unary[1].lam @ g.unary[1].z)
        np.testing.assert_array_equal(lam[2], 0.0)

    def test_lonely_edges(self):
        model, _, _, meas = synthetic_system(30, 5)
        g = build_graph(model, meas, GraphMode.FUSION)
        pg = g.packed
        degree = np.bincount(pg.edge_var, minlength=pg.n_var)
        has_unary = np.zeros(pg.n_var, bool)
        has_unary[pg.unary_var] = True
        want = (degree[pg.edge_var] == 1) & ~has_unary[pg.edge_var]
        np.testing.assert_array_equal(pg.lonely, want)

    def test_packed_blocks_reproduce_wls(self):
        model, _, _, meas = synthetic_system(25, 8)
        ref = wls.solve(wls.assemble(model, meas))
        for mode in GraphMode:
            g = build_graph(model, meas, mode)
            x = wls.solve(wls.assemble_graph(g)).reshape(-1, 2)
            np.testing.assert_allclose(x, ref if mode is not GraphMode.SCALAR else
                                       wls.solve(wls.assemble(model, meas, True)), atol=1e-10)

    def test_copy_is_independent(self, three_bus, table_one):
        pg = build_graph(three_bus, table_one).packed
        cp = pg.copy()
        cp.blocks[0].sigma[:] = 0.0
        cp.unary_lam[:] = 0.0
        assert np.all(pg.unary_lam[0].diagonal() > 0)
        assert np.any(pg.blocks[0].sigma != 0.0)


class TestInitialMessages:
    def test_unary_product_or_default(self, three_bus, table_one):
        g = build_graph(three_bus, table_one, GraphMode.MULTIVARIATE)
        store = initialize_messages(g, MOMENT)
        for e, (fid, v) in enumerate(g.edges):
            if v == 2:
                np.testing.assert_allclose(store.v2f_vec[e], [1.0, 0.0])
                np.testing.assert_allclose(store.v2f_prec[e], 1e-8 * np.eye(2))
            else:
                np.testing.assert_allclose(store.v2f_vec[e], table_one[v].z, rtol=1e-12)
                np.testing.assert_allclose(store.v2f_prec[e], g.unary[v].lam, rtol=1e-12)

    def test_custom_default(self, three_bus):
        pmu = PmuConfig({0: [Channel.voltage(0), Channel.current(1, "from_to")]})
        meas = to_rectangular(generate_measurements(three_bus, np.ones((3, 2)), pmu, rng=0))
        g = build_graph(three_bus, meas, GraphMode.FUSION)
        store = initialize_messages(g, CANONICAL, default_mean=[0.5, 0.5], default_precision=2.0)
        e = [k for k, (_, v) in enumerate(g.edges) if v == 2][0]
        np.testing.assert_allclose(store.v2f_prec[e], 2 * np.eye(2))
        np.testing.assert_allclose(store.v2f_vec[e], [1.0, 1.0])
