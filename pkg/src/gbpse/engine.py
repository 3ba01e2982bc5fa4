"""Synchronous Gaussian belief propagation over packed factor graphs."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import AllSingular, NotConverged, SingularBelief, SingularInnovation
from .factor_graph import FactorGraph, GraphMode, initial_store
from .linalg import DEFAULT_RCOND, equilibrated_inverse, robust_inverse
from .messages import BROADCAST, FORMS, MOMENT, MessageStore, is_canonical

__all__ = [
    "SolverConfig",
    "IterationTrace",
    "RunResult",
    "GbpSolver",
    "run",
    "factor_to_variable",
    "factor_to_variable_canonical",
    "variable_to_factor",
    "variable_to_factor_canonical",
    "compute_belief",
    "broadcast_variable_update",
    "robust_inverse",
]


@dataclass
class SolverConfig:
    form: str = MOMENT
    max_iterations: int = 200
    tol_mean: float = 1e-9
    svd_rcond: float = DEFAULT_RCOND
    damping: float = 0.0

    def __post_init__(self):
        if self.form not in FORMS:
            raise ValueError(f"unknown form {self.form!r}")
        if not self.tol_mean > 0:
            raise ValueError("tol_mean must be positive")
        if not 0 < self.svd_rcond < 1:
            raise ValueError("svd_rcond must lie in (0, 1)")
        if not 0 <= self.damping < 1:
            raise ValueError("damping must lie in [0, 1)")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")


@dataclass
class IterationTrace:
    means: list = field(default_factory=list)
    precisions: list = field(default_factory=list)
    max_delta: list = field(default_factory=list)

    def __len__(self):
        return len(self.means)

    def append(self, mean, prec, delta):
        self.means.append(mean)
        self.precisions.append(prec)
        self.max_delta.append(delta)

    def stacked(self):
        return np.array(self.means)

    def bus_means(self, mode):
        """Per-iteration ``(n_bus, 2)`` rectangular estimates."""
        m = self.stacked()
        if GraphMode(mode) is GraphMode.SCALAR:
            return m.reshape(len(m), -1, 2)
        return m

    def to_csv(self, path, mode):
        bus = self.bus_means(mode)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "variable", "mean_re", "mean_im", "max_delta"])
            for it, (frame, delta) in enumerate(zip(bus, self.max_delta), start=1):
                for v, (re, im) in enumerate(frame):
                    w.writerow([it, v, repr(float(re)), repr(float(im)), repr(float(delta))])


@dataclass
class RunResult:
    mean: np.ndarray
    precision: np.ndarray
    trace: IterationTrace
    converged: bool
    iterations: int
    store: MessageStore
    mode: GraphMode

    def bus_estimate(self):
        if self.mode is GraphMode.SCALAR:
            return self.mean.reshape(-1, 2)
        return self.mean


class GbpSolver:
    """Stateful synchronous GBP on a private copy of the packed graph.

    The stream simulator mutates ``self.pg`` (measurement values, covariances,
    unary factors) between calls to :meth:`step`.
    """

    def __init__(self, graph, config=None, store=None):
        self.config = config or SolverConfig()
        if isinstance(graph, FactorGraph):
            self.mode = graph.mode
            self.pg = graph.packed.copy()
        else:
            self.mode = GraphMode.MULTIVARIATE if graph.dim == 2 else GraphMode.SCALAR
            self.pg = graph.copy()
        form = self.config.form
        self.store = initial_store(self.pg, form) if store is None else store.as_form(form)
        self.iteration = 0
        self.mean = None
        self.precision = None
        self.trace = IterationTrace()

    # -- helpers -----------------------------------------------------------
    def _incoming_moments(self):
        s, rcond = self.store, self.config.svd_rcond
        cov = kernels.pinv_stack(s.v2f_prec, rcond)
        if is_canonical(s.form):
            return np.einsum("eij,ej->ei", cov, s.v2f_vec), cov
        return s.v2f_vec, cov

    def _to_form(self, eta, prec):
        if is_canonical(self.config.form):
            return eta
        mean, _ = kernels.to_mean(prec, eta, self.config.svd_rcond)
        return mean

    def _info(self, vec, prec):
        if is_canonical(self.config.form):
            return vec
        return np.einsum("eij,ej->ei", prec, vec)

    def beliefs_from_store(self):
        """Belief means and precisions implied by the current f2v messages."""
        u_prec, u_eta = self.pg.unary_aggregate()
        s = self.store
        agg_eta, agg_prec = kernels.aggregate(
            self.pg, self._info(s.f2v_vec, s.f2v_prec), s.f2v_prec, u_eta, u_prec
        )
        mean, _ = kernels.to_mean(agg_prec, agg_eta, self.config.svd_rcond)
        return mean, agg_prec

    def refresh_outgoing(self, variables):
        """Recompute the messages leaving ``variables`` from the current unary factors.

        Used after unary factors change between rounds so the new values reach
        the neighbouring factors in the next round.
        """
        variables = np.unique(np.asarray(variables, dtype=np.int64))
        if variables.size == 0:
            return
        pg, s = self.pg, self.store
        u_prec, u_eta = pg.unary_aggregate()
        eta_v, prec_v, _, _ = kernels.variable_phase(
            pg, self._info(s.f2v_vec, s.f2v_prec), s.f2v_prec, u_eta, u_prec,
            broadcast=self.config.form == BROADCAST,
        )
        mask = np.isin(pg.edge_var, variables)
        s.v2f_prec[mask] = prec_v[mask]
        s.v2f_vec[mask] = self._to_form(eta_v[mask], prec_v[mask])

    # -- iteration -----------------------------------------------------------
    def step(self):
        """One synchronous round; returns the max belief-mean change."""
        cfg, pg, s = self.config, self.pg, self.store
        mean_in, cov_in = self._incoming_moments()
        eta_f, prec_f, ok = kernels.factor_phase(pg, pg.blocks, cov_in, mean_in, cfg.svd_rcond)
        if not ok:
            raise SingularInnovation("innovation covariance has no significant direction")
        vec_f = self._to_form(eta_f, prec_f)
        if cfg.damping > 0 and self.iteration > 0:
            w = cfg.damping
            vec_f = (1 - w) * vec_f + w * s.f2v_vec
            prec_f = (1 - w) * prec_f + w * s.f2v_prec
            eta_f = self._info(vec_f, prec_f)
        elif not is_canonical(cfg.form):
            eta_f = self._info(vec_f, prec_f)
        s.f2v_vec, s.f2v_prec = vec_f, prec_f

        u_prec, u_eta = pg.unary_aggregate()
        eta_v, prec_v, agg_eta, agg_prec = kernels.variable_phase(
            pg, eta_f, prec_f, u_eta, u_prec, broadcast=cfg.form == BROADCAST
        )
        s.v2f_vec, s.v2f_prec = self._to_form(eta_v, prec_v), prec_v

        mean, _ = kernels.to_mean(agg_prec, agg_eta, cfg.svd_rcond)
        delta = np.inf if self.mean is None else float(np.max(np.abs(mean - self.mean), initial=0.0))
        self.mean, self.precision = mean, agg_prec
        self.iteration += 1
        self.trace.append(mean, agg_prec, delta)
        return delta

    def run(self, max_iterations=None, callback=None, check_beliefs=True, raise_not_converged=False):
        """Iterate until the belief means settle or the iteration budget runs out.

        ``callback(solver)`` is invoked after every round.  A singular belief
        precision at the end raises :class:`SingularBelief`; with
        ``raise_not_converged`` an exhausted budget raises
        :class:`NotConverged` carrying the result as ``.result``.
        """
        limit = self.config.max_iterations if max_iterations is None else max_iterations
        converged = False
        for _ in range(limit):
            delta = self.step()
            if callback is not None:
                callback(self)
            if delta < self.config.tol_mean:
                converged = True
                break
        result = RunResult(self.mean, self.precision, self.trace, converged, self.iteration,
                           self.store, self.mode)
        if check_beliefs:
            bad = singular_beliefs(self.precision)
            if np.any(bad):
                err = SingularBelief(f"{int(bad.sum())} belief precisions are not positive definite")
                err.result = result
                err.variables = np.flatnonzero(bad)
                raise err
        if raise_not_converged and not converged:
            err = NotConverged(f"no convergence within {limit} iterations")
            err.result = result
            raise err
        return result


def singular_beliefs(prec, rtol=1e-12):
    w = np.linalg.eigvalsh(prec)
    scale = np.abs(w).max(axis=-1)
    return (w[..., 0] <= rtol * scale) | (scale == 0)


def run(graph, config=None, store=None, callback=None, **kwargs):
    return GbpSolver(graph, config, store).run(callback=callback, **kwargs)


# ---- single-message operations ------------------------------------------------


def _others(factor, target, incoming):
    variables = tuple(factor.variables)
    if target not in variables:
        raise ValueError(f"variable {target} is not attached to factor {factor.id}")
    t = variables.index(target)
    if isinstance(incoming, dict):
        msgs = [incoming[v] for v in variables if v != target]
    elif len(variables) == 2:
        msgs = [incoming]
    else:
        msgs = list(incoming)
    return t, [a for a in range(len(variables)) if a != t], msgs


def _factor_message(factor, target, means, covs, rcond):
    t, others, _ = _others(factor, target, {v: None for v in factor.variables})
    V = np.array(factor.sigma, dtype=float)
    res = np.array(factor.z, dtype=float)
    for a, m, P in zip(others, means, covs):
        Ha = factor.H[a]
        V = V + Ha @ P @ Ha.T
        res = res - Ha @ m
    try:
        Vi = equilibrated_inverse(V, rcond)
    except AllSingular as exc:
        raise SingularInnovation(str(exc)) from None
    Ht = factor.H[t]
    prec = Ht.T @ Vi @ Ht
    return Ht.T @ Vi @ res, 0.5 * (prec + prec.T)


def factor_to_variable(factor, incoming, target, rcond=DEFAULT_RCOND):
    """Moment-form message from ``factor`` to variable ``target``.

    ``incoming`` is the ``(mean, precision)`` message from the other endpoint,
    or a dict keyed by variable id for factors with more endpoints.
    """
    _, _, msgs = _others(factor, target, incoming)
    means = [np.asarray(m, dtype=float) for m, _ in msgs]
    covs = [robust_inverse(p, rcond) for _, p in msgs]
    eta, prec = _factor_message(factor, target, means, covs, rcond)
    return robust_inverse(prec, rcond) @ eta, prec


def factor_to_variable_canonical(factor, incoming, target, rcond=DEFAULT_RCOND):
    """Canonical-form twin of :func:`factor_to_variable`; returns ``(eta, precision)``."""
    _, _, msgs = _others(factor, target, incoming)
    covs = [robust_inverse(p, rcond) for _, p in msgs]
    means = [P @ np.asarray(e, dtype=float) for (e, _), P in zip(msgs, covs)]
    return _factor_message(factor, target, means, covs, rcond)


def variable_to_factor_canonical(messages):
    """Sum of canonical messages ``[(eta, precision), ...]``."""
    eta = sum(np.asarray(e, dtype=float) for e, _ in messages)
    prec = sum(np.asarray(p, dtype=float) for _, p in messages)
    return eta, 0.5 * (prec + prec.T)


def variable_to_factor(messages, rcond=DEFAULT_RCOND):
    """Product of moment messages ``[(mean, precision), ...]``."""
    eta, prec = variable_to_factor_canonical(
        [(np.asarray(p) @ np.asarray(m), p) for m, p in messages]
    )
    return robust_inverse(prec, rcond) @ eta, prec


def compute_belief(messages, rcond=DEFAULT_RCOND):
    """Marginal ``(mean, precision)`` from every incoming moment message."""
    mean, prec = variable_to_factor(messages, rcond)
    if singular_beliefs(prec[None])[0]:
        raise SingularBelief("belief precision is not positive definite")
    return mean, prec


def broadcast_variable_update(incoming, unary=(), rcond=DEFAULT_RCOND):
    """Outgoing canonical messages on every edge plus the belief.

    ``incoming`` lists canonical factor messages in edge order, ``unary`` the
    canonical unary terms.  Returns ``(outgoing, (mean, precision))``.
    """
    eta, prec = variable_to_factor_canonical(list(incoming) + list(unary))
    out = [(eta - np.asarray(e), prec - np.asarray(p)) for e, p in incoming]
    return out, (robust_inverse(prec, rcond) @ eta, prec)
