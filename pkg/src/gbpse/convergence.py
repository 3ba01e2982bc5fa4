"""Convergence analysis of the fused/multivariate GBP mean recursion.

Message precisions do not depend on the means, so they are iterated to their
fixed point first.  With precisions frozen there, the stacked
variable-to-factor means obey the affine recursion ``z <- b - Q z`` whose
behaviour is governed by the spectral radius of ``Q``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import kernels
from .errors import NearSingular, NotConverged, PowerIterationStalled
from .factor_graph import FactorGraph, GraphMode, initial_store
from .linalg import DEFAULT_RCOND, equilibrated_inverse

DENSE_SLOT_LIMIT = 2000


def _packed(graph):
    if isinstance(graph, FactorGraph):
        if graph.mode is GraphMode.SCALAR:
            raise ValueError("convergence analysis covers multivariate and fusion graphs only")
        return graph.packed
    return graph


@dataclass
class PrecisionFixedPoint:
    f2v_prec: np.ndarray  # (E, D, D) factor-to-variable precisions
    v2f_prec: np.ndarray  # (E, D, D) variable-to-factor precisions
    iterations: int
    residual: float
    history: list = field(default_factory=list)


def _precision_update(pg, v2f_prec, rcond):
    E, D = pg.n_edges, pg.dim
    cov = kernels.pinv_stack(v2f_prec, rcond)
    _, f2v, ok = kernels.factor_phase(pg, pg.blocks, cov, np.zeros((E, D)), rcond)
    u_prec, _ = pg.unary_aggregate()
    zeros_e, zeros_v = np.zeros((E, D)), np.zeros((pg.n_var, D))
    _, v2f, _, _ = kernels.variable_phase(pg, zeros_e, f2v, zeros_v, u_prec, broadcast=False)
    return f2v, v2f


def _rel_change(new, old):
    diff = np.linalg.norm(new - old, axis=(1, 2))
    scale = np.maximum(np.linalg.norm(new, axis=(1, 2)), 1.0)
    return float(np.max(diff / scale, initial=0.0))


def iterate_precision_fixed_point(graph, init=None, tol=1e-13, max_iter=1000, rcond=DEFAULT_RCOND):
    """Synchronous precision-only iteration to its fixed point.

    The change measure is the per-edge Frobenius change of the
    factor-to-variable precision relative to its norm (floored at one).
    ``iterations`` counts updates up to the first iterate that its successor
    reproduces within ``tol``.
    """
    pg = _packed(graph)
    v2f = initial_store(pg).v2f_prec if init is None else np.array(init, dtype=float)
    f2v_prev = None
    history = []
    for it in range(1, max_iter + 1):
        f2v, v2f = _precision_update(pg, v2f, rcond)
        if f2v_prev is not None:
            res = _rel_change(f2v, f2v_prev)
            history.append(res)
            if res < tol:
                return PrecisionFixedPoint(f2v, v2f, it - 1, res, history)
        f2v_prev = f2v
    err = NotConverged(f"precision iteration did not settle in {max_iter} rounds")
    err.result = PrecisionFixedPoint(f2v, v2f, max_iter, history[-1] if history else np.inf, history)
    raise err


@dataclass
class ConvergenceSystem:
    Q: sp.csr_matrix
    b: np.ndarray
    slots: np.ndarray  # (E, 2): variable id, factor id of each variable-to-factor slot
    dim: int
    fixed_point: PrecisionFixedPoint
    G: np.ndarray  # (E, D, D) H_i^T V^-1 H_j seen from the receiving edge
    c: np.ndarray  # (E, D) H_i^T V^-1 z
    packed: object = field(repr=False, default=None)

    @property
    def n_slots(self):
        return len(self.slots)

    def slot_table(self):
        return [{"slot": s, "variable": int(v), "factor": int(f)} for s, (v, f) in enumerate(self.slots)]

    def to_json(self):
        return json.dumps({"dim": self.dim, "slots": self.slot_table(), "b": self.b.tolist()})

    def iterate(self, z0, steps):
        """Trajectory ``z(1..steps)`` of ``z <- b - Q z`` from ``z0``."""
        z = np.asarray(z0, dtype=float).reshape(-1)
        out = []
        for _ in range(steps):
            z = self.b - self.Q @ z
            out.append(z)
        return np.array(out)


def assemble_mean_recursion(graph, fixed_point, rcond=DEFAULT_RCOND):
    """Feedback matrix ``Q`` and constant ``b`` of the frozen-precision mean recursion."""
    pg = _packed(graph)
    D, E = pg.dim, pg.n_edges
    v2f = fixed_point.v2f_prec
    cov = kernels.pinv_stack(v2f, rcond)
    partner = pg.partner()
    G = np.zeros((E, D, D))
    c = np.zeros((E, D))
    slots = np.zeros((E, 2), dtype=np.int64)
    for blk in pg.blocks:
        F, k, r, _ = blk.H.shape
        e = blk.edge_offset + np.arange(F * k).reshape(F, k)
        slots[e.reshape(-1), 0] = blk.var.reshape(-1)
        slots[e.reshape(-1), 1] = np.repeat(blk.factor_ids, k)
        for t in range(k):
            o = 1 - t
            Ho, Ht = blk.H[:, o], blk.H[:, t]
            V = blk.sigma + np.einsum("frd,fde,fse->frs", Ho, cov[e[:, o]], Ho)
            HtVi = np.einsum("frd,frs->fds", Ht, equilibrated_inverse(V, rcond))
            G[e[:, t]] = np.einsum("fds,fse->fde", HtVi, Ho)
            c[e[:, t]] = np.einsum("fds,fs->fd", HtVi, blk.z)

    _, u_eta = pg.unary_aggregate()
    lam_inv = cov
    pairs = pg.exclusion_pairs()
    acc = u_eta[pg.edge_var].copy()
    if len(pairs):
        np.add.at(acc, pairs[:, 0], c[pairs[:, 1]])
    b = np.einsum("eij,ej->ei", lam_inv, acc)
    lonely = pg.lonely
    b[lonely] = pg.default_mean[pg.edge_var[lonely]]

    if len(pairs):
        blocks = np.einsum("pij,pjk->pik", lam_inv[pairs[:, 0]], G[pairs[:, 1]])
        rows = pairs[:, 0][:, None, None] * D + np.arange(D)[None, :, None]
        cols = partner[pairs[:, 1]][:, None, None] * D + np.arange(D)[None, None, :]
        rows, cols = np.broadcast_arrays(rows, cols)
        Q = sp.csr_matrix(
            (blocks.reshape(-1), (rows.reshape(-1), cols.reshape(-1))), shape=(E * D, E * D)
        )
    else:
        Q = sp.csr_matrix((E * D, E * D))
    return ConvergenceSystem(Q, b.reshape(-1), slots, D, fixed_point, G, c, pg)


@dataclass
class SpectralReport:
    rho: float
    method: str
    iterations: int
    converged: bool

    @property
    def one_minus_rho(self):
        return 1.0 - self.rho


def _dense_rho(Q):
    if Q.shape[0] == 0:
        return 0.0
    w = np.linalg.eigvals(Q.toarray())
    return float(np.max(np.abs(w)))


def _power_rho(Q, block=8, seed=0, max_iter=10_000, tol=1e-10, check_every=5):
    """Block power iteration with Rayleigh-Ritz extraction.

    A block of starting vectors copes with complex or opposite-sign dominant
    eigenvalues that make single-vector magnitude tracking oscillate.
    """
    N = Q.shape[0]
    if N == 0 or Q.nnz == 0 or not np.any(Q.data):
        return 0.0, 0, True
    p = min(block, N)
    X, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((N, p)))
    prev = None
    for it in range(1, max_iter + 1):
        Y = Q @ X
        if it % check_every == 0:
            T = X.T @ Y
            theta, S = np.linalg.eig(T)
            k = int(np.argmax(np.abs(theta)))
            rho = float(np.abs(theta[k]))
            y = X @ S[:, k]
            resid = np.linalg.norm(Q @ y - theta[k] * y) / max(np.linalg.norm(y), 1e-300)
            if prev is not None and abs(rho - prev) < tol and resid < max(tol, 1e-8 * rho):
                return rho, it, True
            prev = rho
        norm = np.linalg.norm(Y)
        if norm == 0:
            return 0.0, it, True
        X, _ = np.linalg.qr(Y)
    raise PowerIterationStalled(f"no settled estimate after {max_iter} products (last {prev})")


def spectral_radius(system, method="auto", **kwargs):
    """``rho(Q)`` by dense eigenvalues or block power iteration.

    ``auto`` uses the dense solver up to 2000 slots and power iteration
    beyond, falling back to dense if power iteration stalls.
    """
    Q = system.Q if isinstance(system, ConvergenceSystem) else sp.csr_matrix(system)
    slots = Q.shape[0] // (system.dim if isinstance(system, ConvergenceSystem) else 1)
    if method == "dense" or (method == "auto" and slots <= DENSE_SLOT_LIMIT):
        return SpectralReport(_dense_rho(Q), "dense", 0, True)
    if method not in ("auto", "power"):
        raise ValueError(f"unknown method {method!r}")
    try:
        rho, it, ok = _power_rho(Q, **kwargs)
    except PowerIterationStalled:
        if method == "power":
            raise
        return SpectralReport(_dense_rho(Q), "dense", 0, True)
    return SpectralReport(rho, "power", it, ok)


def fixed_point_means(system):
    """Solve ``(I + Q) z = b``; returns ``(z, relative residual)``."""
    N = len(system.b)
    A = (sp.identity(N, format="csc") + system.Q).tocsc()
    try:
        z = spla.splu(A).solve(system.b)
    except RuntimeError as exc:
        raise NearSingular(f"I + Q is singular: {exc}") from None
    if not np.all(np.isfinite(z)):
        raise NearSingular("non-finite fixed point")
    res = np.linalg.norm(A @ z - system.b) / max(np.linalg.norm(system.b), 1e-300)
    return z, float(res)


def beliefs_from_means(system, z, rcond=DEFAULT_RCOND):
    """Belief means implied by stacked variable-to-factor means ``z``."""
    pg = system.packed
    D = system.dim
    z = np.asarray(z, dtype=float).reshape(-1, D)
    partner = pg.partner()
    fp = system.fixed_point
    eta_f = system.c - np.einsum("eij,ej->ei", system.G, z[partner])
    u_prec, u_eta = pg.unary_aggregate()
    eta, prec = kernels.aggregate(pg, eta_f, fp.f2v_prec, u_eta, u_prec)
    mean, _ = kernels.to_mean(prec, eta, rcond)
    return mean


def analyze(graph, rcond=DEFAULT_RCOND, method="auto"):
    """Precision fixed point, recursion and spectral radius in one call."""
    fp = iterate_precision_fixed_point(graph, rcond=rcond)
    system = assemble_mean_recursion(graph, fp, rcond)
    return system, spectral_radius(system, method)
