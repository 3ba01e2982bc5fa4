"""Message-update kernels over packed graph arrays.

Each phase has a numba loop kernel and a vectorised numpy twin with the same
signature and semantics; :func:`use_numba` picks one per call.  All kernels
work on information form internally (precision, information vector); the
engine converts to means where the moment form asks for it.
"""

import numpy as np

from ._accel import njit, numba_enabled
from .linalg import _equilibrated_pinv_into, _pinv_sym_into, equilibrated_inverse, robust_inverse


def use_numba():
    return numba_enabled()


def _sym(M):
    return 0.5 * (M + np.swapaxes(M, -1, -2))


# ---- inverse of a stack of precisions ---------------------------------------


def pinv_stack_np(prec, rcond):
    out = np.zeros_like(prec)
    nz = np.abs(prec).reshape(len(prec), -1).max(axis=1) > 0 if len(prec) else np.zeros(0, bool)
    if np.any(nz):
        out[nz] = robust_inverse(prec[nz], rcond)
    return out


@njit
def pinv_stack_nb(prec, rcond):
    out = np.zeros_like(prec)
    for e in range(prec.shape[0]):
        _pinv_sym_into(prec[e], rcond, out[e])
    return out


def pinv_stack(prec, rcond):
    if use_numba():
        return pinv_stack_nb(np.ascontiguousarray(prec), rcond)
    return pinv_stack_np(prec, rcond)


def to_mean(prec, eta, rcond):
    """Means ``prec^+ @ eta`` and the pseudo-inverses used."""
    cov = pinv_stack(prec, rcond)
    return np.einsum("eij,ej->ei", cov, eta), cov


# ---- factor phase ----------------------------------------------------------


def factor_block_np(var, H, z, sigma, offset, cov, mean, rcond):
    """Factor-to-variable information messages for one packed block.

    ``cov``/``mean`` are the covariance and mean of every incoming
    variable-to-factor message (global edge arrays).  Returns
    ``(eta, prec, ok)`` for the block's edges in slot order.
    """
    F, k, r, D = H.shape
    e = offset + np.arange(F * k).reshape(F, k)
    P = cov[e]
    m = mean[e]
    S = np.einsum("fkrd,fkde,fkse->fkrs", H, P, H)
    Hm = np.einsum("fkrd,fkd->fkr", H, m)
    eta = np.empty((F, k, D))
    prec = np.empty((F, k, D, D))
    for t in range(k):
        V = sigma.copy()
        res = z.copy()
        for a in range(k):
            if a != t:
                V += S[:, a]
                res -= Hm[:, a]
        Vi = equilibrated_inverse(V, rcond)
        Ht = H[:, t]
        HtVi = np.einsum("frd,frs->fds", Ht, Vi)
        prec[:, t] = _sym(np.einsum("fds,fse->fde", HtVi, Ht))
        eta[:, t] = np.einsum("fds,fs->fd", HtVi, res)
    return eta.reshape(F * k, D), prec.reshape(F * k, D, D), True


@njit
def factor_block_nb(var, H, z, sigma, offset, cov, mean, rcond):
    F, k, r, D = H.shape
    eta = np.zeros((F * k, D))
    prec = np.zeros((F * k, D, D))
    V = np.empty((r, r))
    Vi = np.empty((r, r))
    res = np.empty(r)
    HtVi = np.empty((D, r))
    HP = np.empty((r, D))
    ok = True
    for f in range(F):
        for t in range(k):
            for p in range(r):
                res[p] = z[f, p]
                for q in range(r):
                    V[p, q] = sigma[f, p, q]
            for a in range(k):
                if a == t:
                    continue
                e = offset + f * k + a
                Ha = H[f, a]
                for p in range(r):
                    for d in range(D):
                        s = 0.0
                        for c in range(D):
                            s += Ha[p, c] * cov[e, c, d]
                        HP[p, d] = s
                for p in range(r):
                    acc = 0.0
                    for d in range(D):
                        acc += Ha[p, d] * mean[e, d]
                    res[p] -= acc
                    for q in range(r):
                        s = 0.0
                        for d in range(D):
                            s += HP[p, d] * Ha[q, d]
                        V[p, q] += s
            if not _equilibrated_pinv_into(V, rcond, Vi):
                ok = False
            Ht = H[f, t]
            for d in range(D):
                for q in range(r):
                    s = 0.0
                    for p in range(r):
                        s += Ht[p, d] * Vi[p, q]
                    HtVi[d, q] = s
            o = f * k + t
            for d in range(D):
                s = 0.0
                for q in range(r):
                    s += HtVi[d, q] * res[q]
                eta[o, d] = s
                for c in range(D):
                    s = 0.0
                    for q in range(r):
                        s += HtVi[d, q] * Ht[q, c]
                    prec[o, d, c] = s
            for d in range(D):
                for c in range(d + 1, D):
                    avg = 0.5 * (prec[o, d, c] + prec[o, c, d])
                    prec[o, d, c] = avg
                    prec[o, c, d] = avg
    return eta, prec, ok


def factor_phase(pg, blocks, cov, mean, rcond):
    """All factor-to-variable information messages, edge-ordered."""
    E, D = pg.n_edges, pg.dim
    eta = np.empty((E, D))
    prec = np.empty((E, D, D))
    ok = True
    kern = factor_block_nb if use_numba() else factor_block_np
    for blk in blocks:
        be, bp, bok = kern(blk.var, blk.H, blk.z, blk.sigma, blk.edge_offset, cov, mean, rcond)
        eta[blk.edge_slice] = be
        prec[blk.edge_slice] = bp
        ok = ok and bool(bok)
    return eta, prec, ok


# ---- variable phase --------------------------------------------------------


def exclusion_np(pg, f2v_eta, f2v_prec, u_eta, u_prec):
    ev = pg.edge_var
    eta = u_eta[ev].copy()
    prec = u_prec[ev].copy()
    pairs = pg.exclusion_pairs()
    if len(pairs):
        np.add.at(eta, pairs[:, 0], f2v_eta[pairs[:, 1]])
        np.add.at(prec, pairs[:, 0], f2v_prec[pairs[:, 1]])
    return eta, prec


@njit
def exclusion_nb(var_ptr, var_edges, f2v_eta, f2v_prec, u_eta, u_prec):
    E, D = f2v_eta.shape
    eta = np.zeros((E, D))
    prec = np.zeros((E, D, D))
    for v in range(len(var_ptr) - 1):
        lo, hi = var_ptr[v], var_ptr[v + 1]
        for p in range(lo, hi):
            t = var_edges[p]
            for d in range(D):
                eta[t, d] = u_eta[v, d]
                for c in range(D):
                    prec[t, d, c] = u_prec[v, d, c]
            for q in range(lo, hi):
                a = var_edges[q]
                if a == t:
                    continue
                for d in range(D):
                    eta[t, d] += f2v_eta[a, d]
                    for c in range(D):
                        prec[t, d, c] += f2v_prec[a, d, c]
    return eta, prec


def aggregate_np(pg, f2v_eta, f2v_prec, u_eta, u_prec):
    """Per-variable sum of every incoming message, unary factors included."""
    eta = u_eta.copy()
    prec = u_prec.copy()
    np.add.at(eta, pg.edge_var, f2v_eta)
    np.add.at(prec, pg.edge_var, f2v_prec)
    return eta, prec


@njit
def aggregate_nb(var_ptr, var_edges, f2v_eta, f2v_prec, u_eta, u_prec):
    eta = u_eta.copy()
    prec = u_prec.copy()
    D = eta.shape[1]
    for v in range(len(var_ptr) - 1):
        for p in range(var_ptr[v], var_ptr[v + 1]):
            a = var_edges[p]
            for d in range(D):
                eta[v, d] += f2v_eta[a, d]
                for c in range(D):
                    prec[v, d, c] += f2v_prec[a, d, c]
    return eta, prec


def aggregate(pg, f2v_eta, f2v_prec, u_eta, u_prec):
    if use_numba():
        return aggregate_nb(pg.var_ptr, pg.var_edges, f2v_eta, f2v_prec, u_eta, u_prec)
    return aggregate_np(pg, f2v_eta, f2v_prec, u_eta, u_prec)


BROADCAST_GUARD = 1e-4


def _cancelled(prec, agg):
    """Edges where aggregate-minus-own lost too many digits to be trusted.

    The test compares the smallest eigenvalue of the difference with the
    trace of the aggregate it was subtracted from.
    """
    D = prec.shape[-1]
    scale = np.trace(agg, axis1=1, axis2=2)
    if D == 1:
        low = prec[:, 0, 0]
    else:
        a, b, c = prec[:, 0, 0], 0.5 * (prec[:, 0, 1] + prec[:, 1, 0]), prec[:, 1, 1]
        low = 0.5 * (a + c) - np.hypot(0.5 * (a - c), b)
    return low <= BROADCAST_GUARD * scale


def exclusion_subset_np(pg, edges, f2v_eta, f2v_prec, u_eta, u_prec, eta, prec):
    """Recompute the exclusion sums of ``edges`` in place."""
    ev = pg.edge_var[edges]
    eta[edges] = u_eta[ev]
    prec[edges] = u_prec[ev]
    pairs = pg.exclusion_pairs()
    if len(pairs):
        flag = np.zeros(pg.n_edges, dtype=bool)
        flag[edges] = True
        pairs = pairs[flag[pairs[:, 0]]]
        np.add.at(eta, pairs[:, 0], f2v_eta[pairs[:, 1]])
        np.add.at(prec, pairs[:, 0], f2v_prec[pairs[:, 1]])


@njit
def broadcast_nb(var_ptr, var_edges, f2v_eta, f2v_prec, u_eta, u_prec, agg_eta, agg_prec, guard):
    E, D = f2v_eta.shape
    eta = np.empty((E, D))
    prec = np.empty((E, D, D))
    for v in range(len(var_ptr) - 1):
        lo, hi = var_ptr[v], var_ptr[v + 1]
        scale = 0.0
        for d in range(D):
            scale += agg_prec[v, d, d]
        for p in range(lo, hi):
            t = var_edges[p]
            for d in range(D):
                eta[t, d] = agg_eta[v, d] - f2v_eta[t, d]
                for c in range(D):
                    prec[t, d, c] = agg_prec[v, d, c] - f2v_prec[t, d, c]
            if D == 1:
                low = prec[t, 0, 0]
            else:
                a, c = prec[t, 0, 0], prec[t, 1, 1]
                b = 0.5 * (prec[t, 0, 1] + prec[t, 1, 0])
                low = 0.5 * (a + c) - np.hypot(0.5 * (a - c), b)
            if low > guard * scale:
                continue
            for d in range(D):
                eta[t, d] = u_eta[v, d]
                for c in range(D):
                    prec[t, d, c] = u_prec[v, d, c]
            for q in range(lo, hi):
                a2 = var_edges[q]
                if a2 == t:
                    continue
                for d in range(D):
                    eta[t, d] += f2v_eta[a2, d]
                    for c in range(D):
                        prec[t, d, c] += f2v_prec[a2, d, c]
    return eta, prec


def variable_phase(pg, f2v_eta, f2v_prec, u_eta, u_prec, broadcast):
    """Variable-to-factor information messages plus the belief aggregate.

    ``broadcast`` subtracts each edge's own contribution from the aggregate
    and falls back to the exclusion sum on edges where that subtraction
    cancelled; otherwise every message sums its exclusion set directly.  Edges whose
    exclusion set is empty receive the default prior.
    """
    agg_eta, agg_prec = aggregate(pg, f2v_eta, f2v_prec, u_eta, u_prec)
    if broadcast and use_numba():
        eta, prec = broadcast_nb(pg.var_ptr, pg.var_edges, f2v_eta, f2v_prec, u_eta, u_prec,
                                 agg_eta, agg_prec, BROADCAST_GUARD)
    elif broadcast:
        ev = pg.edge_var
        eta = agg_eta[ev] - f2v_eta
        prec = agg_prec[ev] - f2v_prec
        bad = np.flatnonzero(_cancelled(prec, agg_prec[ev]))
        if bad.size:
            exclusion_subset_np(pg, bad, f2v_eta, f2v_prec, u_eta, u_prec, eta, prec)
    elif use_numba():
        eta, prec = exclusion_nb(pg.var_ptr, pg.var_edges, f2v_eta, f2v_prec, u_eta, u_prec)
    else:
        eta, prec = exclusion_np(pg, f2v_eta, f2v_prec, u_eta, u_prec)
    lonely = pg.lonely
    if np.any(lonely):
        lv = pg.edge_var[lonely]
        prec[lonely] = pg.default_prec[lv]
        eta[lonely] = np.einsum("eij,ej->ei", pg.default_prec[lv], pg.default_mean[lv])
    return eta, _sym(prec), agg_eta, _sym(agg_prec)
