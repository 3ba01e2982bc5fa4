import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gbpse import wls
from gbpse.engine import (
    GbpSolver,
    SolverConfig,
    broadcast_variable_update,
    compute_belief,
    factor_to_variable,
    factor_to_variable_canonical,
    run,
    variable_to_factor,
    variable_to_factor_canonical,
)
from gbpse.errors import SingularBelief
from gbpse.factor_graph import GraphMode, PairwiseFactor, build_graph
from gbpse.messages import BROADCAST, CANONICAL, FORMS, MOMENT
from gbpse.power_model import (
    Branch,
    Bus,
    BusBranchModel,
    Channel,
    FROM_TO,
    PmuConfig,
    generate_measurements,
    synth_state,
    to_rectangular,
)

from conftest import edge_disagreement, read_csv, synthetic_system


def random_spd(rng, n, scale=1.0):
    A = rng.normal(size=(n, n))
    return scale * (A @ A.T + n * np.eye(n))


def schur_message(H_t, H_o, z, sigma, m_o, lam_o):
    """Marginalise the other endpoint out of the joint information form."""
    W = np.linalg.inv(sigma)
    H = np.hstack([H_t, H_o])
    J = H.T @ W @ H
    h = H.T @ W @ z
    d = H_t.shape[1]
    J[d:, d:] += lam_o
    h[d:] += lam_o @ m_o
    K = J[:d, d:] @ np.linalg.inv(J[d:, d:])
    return h[:d] - K @ h[d:], J[:d, :d] - K @ J[d:, :d]


class TestSingleMessages:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 3))
    def test_factor_message_matches_schur_complement(self, seed, d):
        rng = np.random.default_rng(seed)
        r = 2 * d
        Hi, Hj = rng.normal(size=(r, 2)), rng.normal(size=(r, 2))
        f = PairwiseFactor(0, (0, 1), rng.normal(size=r), random_spd(rng, r, 0.1), (Hi, Hj),
                           tuple(range(d)))
        m_o, lam_o = rng.normal(size=2), random_spd(rng, 2, 3.0)
        eta_ref, lam_ref = schur_message(Hi, Hj, f.z, f.sigma, m_o, lam_o)
        mean, lam = factor_to_variable(f, (m_o, lam_o), 0)
        np.testing.assert_allclose(lam, lam_ref, rtol=1e-9, atol=1e-9 * np.abs(lam_ref).max())
        np.testing.assert_allclose(lam @ mean, eta_ref, rtol=1e-8, atol=1e-8 * np.abs(eta_ref).max())
        eta_c, lam_c = factor_to_variable_canonical(f, (lam_o @ m_o, lam_o), 0)
        np.testing.assert_allclose(eta_c, lam @ mean, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(lam_c, lam, rtol=1e-10)

    def test_message_to_second_endpoint(self):
        rng = np.random.default_rng(1)
        Hi, Hj = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
        f = PairwiseFactor(0, (4, 7), rng.normal(size=2), np.eye(2) * 0.01, (Hi, Hj), (0,))
        m_o, lam_o = rng.normal(size=2), random_spd(rng, 2)
        eta_ref, lam_ref = schur_message(Hj, Hi, f.z, f.sigma, m_o, lam_o)
        mean, lam = factor_to_variable(f, {4: (m_o, lam_o)}, 7)
        np.testing.assert_allclose(lam, lam_ref, rtol=1e-10)
        np.testing.assert_allclose(lam @ mean, eta_ref, rtol=1e-9)

    def test_four_endpoint_message(self):
        """Scalar current factor: marginalise three scalar endpoints at once."""
        rng = np.random.default_rng(2)
        H = [rng.normal(size=(1, 1)) for _ in range(4)]
        f = PairwiseFactor(0, (0, 1, 2, 3), np.array([0.3]), np.array([[1e-3]]), tuple(H), (0,))
        msgs = {v: (rng.normal(size=1), np.array([[rng.uniform(1, 5)]])) for v in (0, 1, 3)}
        H_o = np.hstack([H[0], H[1], H[3]])
        m_o = np.concatenate([msgs[v][0] for v in (0, 1, 3)])
        lam_o = np.diag([msgs[v][1][0, 0] for v in (0, 1, 3)])
        eta_ref, lam_ref = schur_message(H[2], H_o, f.z, f.sigma, m_o, lam_o)
        mean, lam = factor_to_variable(f, msgs, 2)
        np.testing.assert_allclose(lam, lam_ref, rtol=1e-10)
        np.testing.assert_allclose(lam @ mean, eta_ref, rtol=1e-10)

    def test_unknown_target(self):
        f = PairwiseFactor(0, (0, 1), np.zeros(2), np.eye(2), (np.eye(2), np.eye(2)), (0,))
        with pytest.raises(ValueError):
            factor_to_variable(f, (np.zeros(2), np.eye(2)), 5)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 5))
    def test_product_matches_sequential_update(self, seed, k):
        """Gaussian product against repeated gain-form conditioning."""
        rng = np.random.default_rng(seed)
        msgs = [(rng.normal(size=2), random_spd(rng, 2, rng.uniform(0.5, 50))) for _ in range(k)]
        m, P = msgs[0][0], np.linalg.inv(msgs[0][1])
        for mi, lam_i in msgs[1:]:
            Pi = np.linalg.inv(lam_i)
            K = P @ np.linalg.inv(P + Pi)
            m, P = m + K @ (mi - m), P - K @ P
        mean, lam = variable_to_factor(msgs)
        np.testing.assert_allclose(mean, m, rtol=1e-9, atol=1e-11)
        np.testing.assert_allclose(np.linalg.inv(lam), P, rtol=1e-9, atol=1e-12)

    def test_canonical_product_is_sum(self):
        eta, lam = variable_to_factor_canonical([(np.ones(2), np.eye(2)), (np.ones(2), 2 * np.eye(2))])
        np.testing.assert_array_equal(eta, [2, 2])
        np.testing.assert_array_equal(lam, 3 * np.eye(2))

    def test_broadcast_equals_exclusion(self):
        rng = np.random.default_rng(4)
        incoming = [(rng.normal(size=2), random_spd(rng, 2)) for _ in range(4)]
        unary = [(rng.normal(size=2), random_spd(rng, 2))]
        out, (mean, lam) = broadcast_variable_update(incoming, unary)
        for a, (eta, prec) in enumerate(out):
            rest = [incoming[b] for b in range(4) if b != a] + unary
            eta_ref, prec_ref = variable_to_factor_canonical(rest)
            np.testing.assert_allclose(eta, eta_ref, atol=1e-12)
            np.testing.assert_allclose(prec, prec_ref, atol=1e-12)
        np.testing.assert_allclose(lam, sum(p for _, p in incoming + unary), atol=1e-12)

    def test_singular_belief(self):
        with pytest.raises(SingularBelief):
            compute_belief([(np.zeros(2), np.diag([1.0, 0.0]))])
        mean, lam = compute_belief([(np.array([1.0, 2.0]), 4 * np.eye(2))])
        np.testing.assert_allclose(mean, [1, 2])


def radial_case(n, seed):
    rng = np.random.default_rng(seed)
    buses = [Bus(i) for i in range(n)]
    branches = [Branch.from_impedance(int(rng.integers(0, i)), i, 0.02, 0.1, b_s=0.01)
                for i in range(1, n)]
    model = BusBranchModel(buses, branches)
    state = synth_state(model, rng)
    # one current per branch keeps the multivariate graph a tree as well
    pmu = PmuConfig({b: [Channel.voltage(b)] for b in range(n)})
    for k, br in enumerate(branches):
        pmu.channels[br.from_bus].append(Channel.current(k, FROM_TO))
    meas = to_rectangular(generate_measurements(model, state, pmu, rng=rng))
    return model, meas


def tree_diameter(model):
    adj = [[] for _ in range(model.n_buses)]
    for br in model.branches:
        adj[br.from_bus].append(br.to_bus)
        adj[br.to_bus].append(br.from_bus)

    def far(src):
        dist = {src: 0}
        todo = [src]
        while todo:
            u = todo.pop()
            for v in adj[u]:
                if v not in dist:
                    dist[v] = dist[u] + 1
                    todo.append(v)
        node = max(dist, key=dist.get)
        return node, dist[node]

    return far(far(0)[0])[1]


class TestSolver:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    @pytest.mark.parametrize("mode", [GraphMode.FUSION, GraphMode.MULTIVARIATE])
    def test_tree_is_exact_after_diameter_rounds(self, seed, mode):
        model, meas = radial_case(12, seed)
        ref = wls.solve(wls.assemble(model, meas))
        solver = GbpSolver(build_graph(model, meas, mode))
        for _ in range(tree_diameter(model) + 1):
            solver.step()
        np.testing.assert_allclose(solver.mean, ref, atol=1e-10)

    @pytest.mark.parametrize("form", FORMS)
    def test_loopy_grid_reaches_wls(self, form, backend):
        model, _, _, meas = synthetic_system(40, 2)
        ref = wls.solve(wls.assemble(model, meas))
        res = run(build_graph(model, meas), SolverConfig(form=form, tol_mean=1e-12, max_iterations=500))
        assert res.converged
        np.testing.assert_allclose(res.bus_estimate(), ref, atol=1e-9)

    def test_deterministic(self):
        model, _, _, meas = synthetic_system(30, 4)
        a = run(build_graph(model, meas), SolverConfig(max_iterations=20))
        b = run(build_graph(model, meas), SolverConfig(max_iterations=20))
        np.testing.assert_array_equal(a.trace.stacked(), b.trace.stacked())

    def test_backends_agree(self, monkeypatch):
        model, _, _, meas = synthetic_system(30, 6)
        out = {}
        for flag in ("0", "1"):
            monkeypatch.setenv("GBPSE_DISABLE_NUMBA", flag)
            out[flag] = run(build_graph(model, meas, GraphMode.SCALAR),
                            SolverConfig(max_iterations=15)).trace.stacked()
        np.testing.assert_allclose(out["0"], out["1"], atol=1e-12)

    def test_damping_keeps_fixed_point(self):
        model, _, _, meas = synthetic_system(30, 7)
        ref = wls.solve(wls.assemble(model, meas))
        res = run(build_graph(model, meas),
                  SolverConfig(damping=0.3, tol_mean=1e-12, max_iterations=1000))
        assert res.converged
        np.testing.assert_allclose(res.mean, ref, atol=1e-9)

    def test_first_delta_is_infinite_and_trace_length(self, three_bus, table_one):
        res = run(build_graph(three_bus, table_one), SolverConfig(max_iterations=5))
        assert np.isinf(res.trace.max_delta[0])
        assert len(res.trace) == res.iterations == 5
        assert not res.converged

    def test_unobserved_bus_raises_singular_belief(self, three_bus, table_one):
        meas = [m for m in table_one if m.channel.kind == "voltage"]
        with pytest.raises(SingularBelief) as info:
            run(build_graph(three_bus, meas[:1] + [table_one[3]]))
        assert list(info.value.variables) == [1]
        assert info.value.result.iterations > 0

    def test_trace_csv(self, tmp_path, three_bus, table_one):
        res = run(build_graph(three_bus, table_one, GraphMode.SCALAR), SolverConfig(max_iterations=3))
        path = tmp_path / "trace.csv"
        res.trace.to_csv(path, GraphMode.SCALAR)
        rows = read_csv(path)
        assert list(rows[0]) == ["iteration", "variable", "mean_re", "mean_im", "max_delta"]
        assert len(rows) == 3 * 3
        assert float(rows[-1]["mean_re"]) == res.bus_estimate()[2, 0]

    @pytest.mark.parametrize(
        "kwargs",
        [dict(form="polar"), dict(tol_mean=0.0), dict(svd_rcond=2.0), dict(damping=1.0),
         dict(max_iterations=0)],
    )
    def test_config_validation(self, kwargs):
        with pytest.raises(ValueError):
            SolverConfig(**kwargs)


class TestFormsAgree:
    @pytest.mark.parametrize("mode", list(GraphMode))
    def test_per_edge_messages(self, mode, backend):
        model, _, _, meas = synthetic_system(25, 9)
        g = build_graph(model, meas, mode)
        solvers = {f: GbpSolver(g, SolverConfig(form=f)) for f in (MOMENT, CANONICAL, BROADCAST)}
        for _ in range(25):
            for s in solvers.values():
                s.step()
            ref = solvers[MOMENT]
            for f in (CANONICAL, BROADCAST):
                mean_gap, prec_gap = edge_disagreement(ref.store, solvers[f].store)
                assert mean_gap <= 1e-10 and prec_gap <= 1e-10
                np.testing.assert_allclose(solvers[f].mean, ref.mean, atol=1e-10)

    def test_broadcast_survives_dominant_message(self):
        """Aggregate minus a message that carries nearly all of it."""
        model, _, _, meas = synthetic_system(25, 0)
        g = build_graph(model, meas, GraphMode.SCALAR)
        a = GbpSolver(g, SolverConfig(form=CANONICAL))
        b = GbpSolver(g, SolverConfig(form=BROADCAST))
        for _ in range(30):
            a.step()
            b.step()
        assert np.all(b.store.v2f_prec > 0)
        np.testing.assert_allclose(b.mean, a.mean, atol=1e-12)
