"""Hot numerical kernels for the interior-point solver.

The dominant cost per iteration is assembling the Schur complement
``H[p, q] = sum_blocks <A_p, W A_q W>`` where A_p is the sparse symmetric
coefficient matrix of constraint row p restricted to one block and W is that
block's (dense) scaling matrix. The pair loop over nonzero entries is a tight
scalar loop, so it is JIT-compiled with numba when available. A vectorized
numpy fallback produces the same upper triangle; set the environment variable
``DISSICERT_DISABLE_NUMBA=1`` to force the fallback.

Entry storage convention used throughout (the "folded" form): each constraint
matrix A_p keeps only lower-triangle positions (i >= j) with value
``v = A_p[i, j]`` on the diagonal and ``v = 2 * A_p[i, j]`` off it. Then
``<A_p, X> = sum_e v_e X[i_e, j_e]`` is a single gather, and the pair formula
below stays symmetric.
"""

from __future__ import annotations

import os

import numpy as np

try:
    if os.environ.get("DISSICERT_DISABLE_NUMBA"):
        raise ImportError("numba disabled by DISSICERT_DISABLE_NUMBA")
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        def decorator(func):
            return func

        if len(args) == 1 and callable(args[0]):
            return args[0]
        return decorator


@njit(cache=True)
def _schur_pairs_jit(h, rows, ci, cj, cv, w):
    """Accumulate one block's contribution into the upper triangle of h.

    Entries must be sorted by constraint row so that e <= f implies
    rows[e] <= rows[f]; only h[p, q] with p <= q is written. For two folded
    entries e, f the exact contribution is

        0.5 * v_e * v_f * (w[i_e, i_f] * w[j_e, j_f] + w[i_e, j_f] * w[j_e, i_f])

    which reproduces <sym(A_p), W sym(A_q) W> for every diagonal/off-diagonal
    combination. Same-row pairs with e != f appear once in the loop but twice
    in the inner product, hence the factor 2 on that branch.
    """
    nnz = rows.shape[0]
    for e in range(nnz):
        p = rows[e]
        ie = ci[e]
        je = cj[e]
        ve = cv[e]
        wi = w[ie]
        wj = w[je]
        for f in range(e, nnz):
            q = rows[f]
            term = 0.5 * ve * cv[f] * (wi[ci[f]] * wj[cj[f]] + wi[cj[f]] * wj[ci[f]])
            if p == q and e != f:
                term *= 2.0
            h[p, q] += term


def _schur_pairs_numpy(h, rows, ci, cj, cv, w, chunk=256):
    """Fallback with identical output contract to :func:`_schur_pairs_jit`.

    Works in chunks of entries against the full entry list, masking out the
    lower-triangle and double-counted pairs before scattering into h.
    """
    nnz = rows.shape[0]
    for lo in range(0, nnz, chunk):
        hi = min(lo + chunk, nnz)
        sl = slice(lo, hi)
        block = 0.5 * (
            w[np.ix_(ci[sl], ci)] * w[np.ix_(cj[sl], cj)]
            + w[np.ix_(ci[sl], cj)] * w[np.ix_(cj[sl], ci)]
        )
        block *= cv[sl, None] * cv[None, :]
        p = rows[sl, None]
        q = rows[None, :]
        e_idx = np.arange(lo, hi)[:, None]
        f_idx = np.arange(nnz)[None, :]
        keep = f_idx >= e_idx
        same_row_pair = (p == q) & (e_idx != f_idx)
        block = np.where(keep, block, 0.0)
        block = np.where(keep & same_row_pair, 2.0 * block, block)
        np.add.at(h, (np.broadcast_to(p, block.shape), np.broadcast_to(q, block.shape)), block)


def schur_block_update(h, rows, ci, cj, cv, w):
    """Dispatch to the JIT kernel or the numpy fallback."""
    if NUMBA_AVAILABLE:
        _schur_pairs_jit(h, rows, ci, cj, cv, w)
    else:
        _schur_pairs_numpy(h, rows, ci, cj, cv, w)


def apply_rows(rows, ci, cj, cv, t, m):
    """Return the m-vector with entries sum_e v_e t[i_e, j_e] grouped by row."""
    vals = cv * t[ci, cj]
    return np.bincount(rows, weights=vals, minlength=m)


def adjoint_matrix(rows, ci, cj, cv, y, size):
    """Dense symmetric sum_p y[p] A_p for one block, undoing the folding."""
    out = np.zeros((size, size))
    yv = y[rows] * cv
    off = ci != cj
    np.add.at(out, (ci[off], cj[off]), 0.5 * yv[off])
    np.add.at(out, (cj[off], ci[off]), 0.5 * yv[off])
    diag = ~off
    np.add.at(out, (ci[diag], cj[diag]), yv[diag])
    return out


def fold_entries(size, ii, jj, vv):
    """Fold symmetric-matrix entries (i >= j) into gather form: doubled off-diagonal."""
    ii = np.asarray(ii, dtype=np.int64)
    jj = np.asarray(jj, dtype=np.int64)
    vv = np.asarray(vv, dtype=float)
    if np.any(ii < jj):
        raise ValueError("entries must satisfy i >= j")
    scale = np.where(ii == jj, 1.0, 2.0)
    return ii, jj, vv * scale


def nt_scaling(x, z):
    """Nesterov-Todd scaling for one PSD block.

    Returns (g, w, lam) with w = g g^T, g^{-1} x g^{-T} = g^T z g = diag(lam),
    so lam holds the geometric-mean spectrum of the scaled point.
    """
    lx = np.linalg.cholesky(x)
    lz = np.linalg.cholesky(z)
    u, s, vt = np.linalg.svd(lz.T @ lx)
    if s[-1] <= 0:
        raise np.linalg.LinAlgError("NT scaling hit a singular scaled point")
    g = lx @ (vt.T / np.sqrt(s))
    w = g @ g.T
    return g, w, s


def max_step_psd(x, dx, chol=None):
    """Largest alpha with x + alpha * dx psd, via eigenvalues of L^{-1} dx L^{-T}."""
    if chol is None:
        chol = np.linalg.cholesky(x)
    m = np.linalg.solve(chol, np.linalg.solve(chol, dx).T)
    lam_min = float(np.linalg.eigvalsh(0.5 * (m + m.T))[0])
    if lam_min >= 0:
        return np.inf
    return -1.0 / lam_min
