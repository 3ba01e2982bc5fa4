"""Small symmetric inverses used by the message-passing kernels."""

import numpy as np

from ._accel import njit
from .errors import AllSingular

DEFAULT_RCOND = 1e-12


def robust_inverse(M, rcond=DEFAULT_RCOND):
    """Pseudo-inverse of a symmetric matrix (or a stack of them).

    Eigen-directions whose magnitude is below ``rcond`` times the largest
    magnitude are dropped.  For a symmetric matrix the singular values are the
    absolute eigenvalues, so this is the truncated-SVD inverse.
    """
    M = np.asarray(M, dtype=float)
    M = 0.5 * (M + np.swapaxes(M, -1, -2))
    w, U = np.linalg.eigh(M)
    smax = np.abs(w).max(axis=-1, keepdims=True)
    if np.any(smax == 0):
        raise AllSingular("matrix has no non-zero singular value")
    keep = np.abs(w) > rcond * smax
    winv = np.where(keep, 1.0 / np.where(keep, w, 1.0), 0.0)
    return (U * winv[..., None, :]) @ np.swapaxes(U, -1, -2)


def equilibrated_inverse(M, rcond=DEFAULT_RCOND):
    """:func:`robust_inverse` after symmetric diagonal scaling.

    ``M = D C D`` with ``C`` unit-diagonal; the cutoff is applied to ``C`` so a
    block whose scale differs by many orders of magnitude from the rest (an
    aged measurement, say) does not push the others under the threshold.
    """
    M = np.asarray(M, dtype=float)
    d = np.sqrt(np.abs(np.diagonal(M, axis1=-2, axis2=-1)))
    d = np.where(d > 0, d, 1.0)
    C = M / (d[..., :, None] * d[..., None, :])
    return robust_inverse(C, rcond) / (d[..., :, None] * d[..., None, :])


# ---- numba helpers --------------------------------------------------------
# Kernels cannot raise package exceptions, so these return a success flag.


@njit
def _pinv_sym_into(M, rcond, out):
    n = M.shape[0]
    if n == 1:
        a = M[0, 0]
        if a == 0.0:
            out[0, 0] = 0.0
            return False
        out[0, 0] = 1.0 / a
        return True
    if n == 2:
        a = M[0, 0]
        b = 0.5 * (M[0, 1] + M[1, 0])
        c = M[1, 1]
        mid = 0.5 * (a + c)
        rad = np.hypot(0.5 * (a - c), b)
        hi = mid + rad
        lo = mid - rad
        smax = max(abs(hi), abs(lo))
        if smax == 0.0:
            out[:, :] = 0.0
            return False
        # unit eigenvector (v0, v1) of hi; (-v1, v0) belongs to lo
        if rad == 0.0:
            v0, v1 = 1.0, 0.0
        elif a >= c:
            v0, v1 = 0.5 * (a - c) + rad, b
        else:
            v0, v1 = b, 0.5 * (c - a) + rad
        nv = np.hypot(v0, v1)
        v0 /= nv
        v1 /= nv
        i1 = 1.0 / hi if abs(hi) > rcond * smax else 0.0
        i2 = 1.0 / lo if abs(lo) > rcond * smax else 0.0
        out[0, 0] = i1 * v0 * v0 + i2 * v1 * v1
        out[0, 1] = i1 * v0 * v1 - i2 * v0 * v1
        out[1, 0] = out[0, 1]
        out[1, 1] = i1 * v1 * v1 + i2 * v0 * v0
        return True
    S = np.empty((n, n))
    for r in range(n):
        for c in range(n):
            S[r, c] = 0.5 * (M[r, c] + M[c, r])
    w = np.empty(n)
    U = np.empty((n, n))
    _jacobi_eigh(S, w, U)
    smax = 0.0
    for k in range(n):
        if abs(w[k]) > smax:
            smax = abs(w[k])
    out[:, :] = 0.0
    if smax == 0.0:
        return False
    for k in range(n):
        if abs(w[k]) > rcond * smax:
            inv = 1.0 / w[k]
            for r in range(n):
                for c in range(n):
                    out[r, c] += U[r, k] * inv * U[c, k]
    return True


@njit
def _jacobi_eigh(A, w, U, max_sweeps=60):
    """Cyclic Jacobi eigen-decomposition of a small symmetric matrix (``A`` is overwritten)."""
    n = A.shape[0]
    for r in range(n):
        for c in range(n):
            U[r, c] = 1.0 if r == c else 0.0
    for _ in range(max_sweeps):
        off = 0.0
        diag = 0.0
        for p in range(n):
            diag += A[p, p] * A[p, p]
            for q in range(p + 1, n):
                off += A[p, q] * A[p, q]
        if off <= 1e-34 * diag or off == 0.0:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta < 0.0:
                    t = -t
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    akp = A[k, p]
                    akq = A[k, q]
                    A[k, p] = c * akp - s * akq
                    A[k, q] = s * akp + c * akq
                for k in range(n):
                    apk = A[p, k]
                    aqk = A[q, k]
                    A[p, k] = c * apk - s * aqk
                    A[q, k] = s * apk + c * aqk
                for k in range(n):
                    ukp = U[k, p]
                    ukq = U[k, q]
                    U[k, p] = c * ukp - s * ukq
                    U[k, q] = s * ukp + c * ukq
    for k in range(n):
        w[k] = A[k, k]


@njit
def _equilibrated_pinv_into(M, rcond, out):
    n = M.shape[0]
    d = np.empty(n)
    for k in range(n):
        v = np.sqrt(abs(M[k, k]))
        d[k] = v if v > 0.0 else 1.0
    C = np.empty((n, n))
    for r in range(n):
        for c in range(n):
            C[r, c] = M[r, c] / (d[r] * d[c])
    ok = _pinv_sym_into(C, rcond, out)
    for r in range(n):
        for c in range(n):
            out[r, c] /= d[r] * d[c]
    return ok
