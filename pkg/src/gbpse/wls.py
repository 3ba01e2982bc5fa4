"""Centralised weighted least squares, observability and accuracy metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import RankDeficient
from .power_model import channel_coefficients

RANK_RTOL = 1e-10
DENSE_LIMIT = 4000  # columns solved with a dense Cholesky factorisation


@dataclass
class LinearSystem:
    """``z = H x + e`` with ``e ~ N(0, sigma)``; column ``D*v + c`` is component ``c`` of variable ``v``."""

    H: sp.csr_matrix
    sigma: sp.csr_matrix
    z: np.ndarray
    n_var: int
    dim: int = 2
    weights: sp.csr_matrix | None = None

    def __post_init__(self):
        if self.weights is None:
            self.weights = _block_inverse(self.sigma)

    @property
    def n_cols(self):
        return self.n_var * self.dim

    def normal_equations(self):
        W = self.weights
        HtW = (self.H.T @ W).tocsr()
        return (HtW @ self.H).tocsc(), HtW @ self.z


def _block_inverse(sigma):
    """Inverse of a block-diagonal sparse covariance, block by block."""
    sigma = sp.csr_matrix(sigma)
    n = sigma.shape[0]
    out = sp.lil_matrix((n, n))
    start = 0
    while start < n:
        # grow the block until no entry leaves it
        end = start + 1
        while True:
            rows = sigma[start:end]
            reach = rows.indices.max(initial=start) + 1 if rows.nnz else end
            if reach <= end:
                break
            end = reach
        block = sigma[start:end, start:end].toarray()
        out[start:end, start:end] = np.linalg.inv(block)
        start = end
    return out.tocsr()


def _system(rows, n_var, dim):
    """Stack ``(z, sigma, [(var, H_block)])`` row groups into a LinearSystem."""
    sig_blocks, z = [], []
    r0 = 0
    trip_r, trip_c, trip_v = [], [], []
    for zk, sk, blocks in rows:
        r = len(zk)
        for var, Hb in blocks:
            rr, cc = np.nonzero(np.ones_like(Hb, dtype=bool))
            trip_r.append(rr + r0)
            trip_c.append(cc + dim * var)
            trip_v.append(np.asarray(Hb, dtype=float)[rr, cc])
        sig_blocks.append(np.atleast_2d(sk))
        z.append(np.asarray(zk, dtype=float))
        r0 += r
    if r0 == 0:
        empty = sp.csr_matrix((0, 0))
        return LinearSystem(sp.csr_matrix((0, n_var * dim)), empty, np.zeros(0), n_var, dim, empty)
    H = sp.csr_matrix(
        (np.concatenate(trip_v), (np.concatenate(trip_r), np.concatenate(trip_c))),
        shape=(r0, n_var * dim),
    )
    W = sp.block_diag([np.linalg.inv(b) for b in sig_blocks], format="csr")
    sigma = sp.block_diag(sig_blocks, format="csr")
    return LinearSystem(H, sigma, np.concatenate(z), n_var, dim, W)


def assemble(model, measurements, diagonal_covariance=False):
    """Linear system of rectangular phasor ``measurements`` over ``model``."""
    rows = []
    for m in measurements:
        sigma = np.diag(np.diag(m.sigma)) if diagonal_covariance else m.sigma
        rows.append((m.z, sigma, channel_coefficients(model, m.channel)))
    return _system(rows, model.n_buses, 2)


def assemble_graph(graph):
    """Linear system equivalent to a factor graph's factors."""
    rows = []
    for u in graph.unary:
        rows.append((u.z, np.linalg.inv(u.lam), [(u.variable, np.eye(len(u.z)))]))
    for f in graph.pairwise:
        rows.append((f.z, f.sigma, list(zip(f.variables, f.H))))
    return _system(rows, len(graph.variables), graph.dim)


def observability(system):
    """Numerical column rank of ``H``.

    Up to ``DENSE_LIMIT`` columns this is a column-pivoted QR of ``H`` with
    relative tolerance ``RANK_RTOL``.  Larger systems use the pivots of a
    sparse LU of ``H^T H``, compared against the square of that tolerance.
    """
    H = system.H
    if H.shape[0] == 0 or H.nnz == 0:
        return {"observable": False, "rank": 0}
    if system.n_cols <= DENSE_LIMIT:
        R = sla.qr(H.toarray(), mode="r", pivoting=True)[0]
        d = np.abs(np.diag(R))
        rank = int(np.sum(d > RANK_RTOL * d[0]))
    else:
        G = (H.T @ H).tocsc()
        try:
            d = np.abs(spla.splu(G, permc_spec="COLAMD", diag_pivot_thresh=1.0).U.diagonal())
            rank = int(np.sum(d > RANK_RTOL**2 * d.max()))
        except RuntimeError:
            rank = system.n_cols - 1
    return {"observable": rank == system.n_cols, "rank": rank}


def solve(system, check_rank=True):
    """WLS estimate as a ``(n_var, dim)`` array."""
    if check_rank:
        obs = observability(system)
        if not obs["observable"]:
            raise RankDeficient(f"rank {obs['rank']} < {system.n_cols}")
    G, rhs = system.normal_equations()
    if system.n_cols <= DENSE_LIMIT:
        try:
            x = sla.cho_solve(sla.cho_factor(G.toarray()), rhs)
        except np.linalg.LinAlgError:
            raise RankDeficient("gain matrix is not positive definite") from None
    else:
        try:
            x = spla.splu(G).solve(rhs)
        except RuntimeError:
            raise RankDeficient("gain matrix is singular") from None
    if not np.all(np.isfinite(x)):
        raise RankDeficient("non-finite solution")
    return x.reshape(system.n_var, system.dim)


def solve_measurements(model, measurements, **kwargs):
    diag = kwargs.pop("diagonal_covariance", False)
    return solve(assemble(model, measurements, diag), **kwargs)


# ---- metrics ---------------------------------------------------------------


def to_polar(x):
    x = np.asarray(x, dtype=float)
    return np.hypot(x[..., 0], x[..., 1]), np.arctan2(x[..., 1], x[..., 0])


def wrap_angle(a):
    """Map angles into (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a), 2 * np.pi)


def rmse(x, truth):
    """``(magnitude RMSE, angle RMSE)`` of rectangular estimates against truth."""
    m, a = to_polar(x)
    mt, at = to_polar(truth)
    return (
        float(np.sqrt(np.mean((m - mt) ** 2))),
        float(np.sqrt(np.mean(wrap_angle(a - at) ** 2))),
    )


@dataclass
class EstimateReport:
    wls_rmse: tuple
    rmse: np.ndarray  # (iterations, 2) GBP RMSE against truth
    rmse_ratio: np.ndarray  # (iterations, 2)
    ae_magnitude: np.ndarray  # (iterations, n)
    ae_angle: np.ndarray  # (iterations, n)

    def iterations_to_ratio(self, level=1.01):
        """First iteration (1-based) with both ratios at or below ``level``, else None."""
        ok = np.all(self.rmse_ratio <= level, axis=1)
        hits = np.flatnonzero(ok)
        return int(hits[0]) + 1 if len(hits) else None


def metrics(gbp_trace, wls_x, truth):
    """Per-iteration RMSE ratio against WLS and polar AE against the WLS estimate.

    ``gbp_trace`` is an ``(iterations, n, 2)`` array of rectangular estimates.
    """
    trace = np.asarray(gbp_trace, dtype=float)
    wls_r = rmse(wls_x, truth)
    per = np.array([rmse(x, truth) for x in trace]).reshape(len(trace), 2)
    ratio = per / np.where(np.array(wls_r) > 0, wls_r, np.nan)
    m, a = to_polar(trace)
    mw, aw = to_polar(wls_x)
    return EstimateReport(
        wls_r, per, ratio, np.abs(m - mw), np.abs(wrap_angle(a - aw))
    )


def ae_quantiles(ae):
    """Box-plot statistics per iteration: q25, q50, q75 and 1.5-IQR whiskers."""
    ae = np.asarray(ae, dtype=float)
    q25, q50, q75 = np.percentile(ae, [25, 50, 75], axis=1)
    iqr = q75 - q25
    lo_fence, hi_fence = q25 - 1.5 * iqr, q75 + 1.5 * iqr
    lo = np.array([row[row >= f].min() for row, f in zip(ae, lo_fence)])
    hi = np.array([row[row <= f].max() for row, f in zip(ae, hi_fence)])
    return {"q25": q25, "q50": q50, "q75": q75, "whisker_lo": lo, "whisker_hi": hi}
