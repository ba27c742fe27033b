"""Problem and solution containers for the semidefinite programming backend.

The public problem form is the linear-matrix-inequality (dual) form: decision
vector ``y`` in R^N, a linear objective ``c^T y``, a list of matrix blocks that
are affine in ``y`` and required positive semidefinite, and linear equalities
``G y = h``. Two block kinds exist:

* :class:`GramBlock` - the block *is* a symmetric matrix variable whose lower
  triangle occupies a contiguous range of decision indices. This is what the
  SOS layer emits for Gram and plain PSD matrix variables, and it is what the
  presolve converts into primal cone variables.
* :class:`AffineBlock` - a general affine map ``y -> F0 + sum_i y_i F_i`` given
  by sparse coefficient triples.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

OPTIMAL = "Optimal"
FEASIBLE = "Feasible"
INFEASIBLE = "Infeasible"
NUMERICAL_FAILURE = "NumericalFailure"


def tri_size(n: int) -> int:
    return n * (n + 1) // 2


def tri_index(i: int, j: int) -> int:
    """Index of entry (i, j), i >= j, in the row-major lower-triangle ordering."""
    if i < j:
        i, j = j, i
    return i * (i + 1) // 2 + j


def tri_coords(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Arrays (i, j) of the lower-triangle coordinates in tri_index order."""
    ii, jj = np.tril_indices(n)
    order = np.argsort(ii * (ii + 1) // 2 + jj, kind="stable")
    return ii[order], jj[order]


@dataclass(frozen=True)
class GramBlock:
    """PSD block that is itself a matrix variable.

    Decision indices ``var_offset .. var_offset + size(size+1)/2 - 1`` hold the
    lower triangle of the matrix in :func:`tri_index` order; each off-diagonal
    decision equals the matrix entry (not twice it).
    """

    size: int
    var_offset: int

    @property
    def n_vars(self) -> int:
        return tri_size(self.size)


@dataclass(frozen=True)
class AffineBlock:
    """PSD constraint on F0 + sum_i y_i F_i with symmetric F's.

    ``const`` holds F0 as (i, j, value) triples with i >= j; ``terms`` holds the
    F_i entries as (var, i, j, value) with i >= j. Values are the matrix entries
    (the symmetric mirror is implied).
    """

    size: int
    const: tuple[tuple[int, int, float], ...] = ()
    terms: tuple[tuple[int, int, int, float], ...] = ()

    def f0_dense(self) -> np.ndarray:
        m = np.zeros((self.size, self.size))
        for i, j, v in self.const:
            m[i, j] = v
            m[j, i] = v
        return m

    def eval(self, y: np.ndarray) -> np.ndarray:
        m = self.f0_dense()
        for k, i, j, v in self.terms:
            m[i, j] += v * y[k]
            if i != j:
                m[j, i] += v * y[k]
        return m


@dataclass
class SdpProblem:
    """Linear objective, PSD blocks affine in y, and linear equalities G y = h."""

    n_vars: int
    objective: np.ndarray
    blocks: list
    eq_g: sp.csr_matrix
    eq_h: np.ndarray

    def __post_init__(self):
        self.objective = np.asarray(self.objective, dtype=float)
        if self.objective.shape != (self.n_vars,):
            raise ValueError("objective length must equal n_vars")
        self.eq_h = np.asarray(self.eq_h, dtype=float)
        if self.eq_g.shape[1] != self.n_vars:
            raise ValueError("equality matrix must have n_vars columns")
        if self.eq_g.shape[0] != self.eq_h.shape[0]:
            raise ValueError("equality right-hand side length mismatch")
        seen = np.zeros(self.n_vars, dtype=bool)
        for b in self.blocks:
            if isinstance(b, GramBlock):
                lo, hi = b.var_offset, b.var_offset + b.n_vars
                if hi > self.n_vars:
                    raise ValueError("GramBlock variable range out of bounds")
                if seen[lo:hi].any():
                    raise ValueError("GramBlock variable ranges overlap")
                seen[lo:hi] = True
            elif isinstance(b, AffineBlock):
                for k, i, j, _ in b.terms:
                    if not (0 <= k < self.n_vars and 0 <= j <= i < b.size):
                        raise ValueError("AffineBlock term out of bounds")
            else:
                raise TypeError(f"unknown block type {type(b).__name__}")

    def block_values(self, y: np.ndarray) -> list[np.ndarray]:
        out = []
        for b in self.blocks:
            if isinstance(b, GramBlock):
                m = np.zeros((b.size, b.size))
                ii, jj = tri_coords(b.size)
                vals = y[b.var_offset : b.var_offset + b.n_vars]
                m[ii, jj] = vals
                m[jj, ii] = vals
                out.append(m)
            else:
                out.append(b.eval(y))
        return out

    def min_block_eig(self, y: np.ndarray) -> float:
        vals = [np.linalg.eigvalsh(m)[0] for m in self.block_values(y)]
        return float(min(vals)) if vals else 0.0

    def eq_residual(self, y: np.ndarray) -> float:
        if self.eq_g.shape[0] == 0:
            return 0.0
        return float(np.max(np.abs(self.eq_g @ y - self.eq_h)))


@dataclass
class SdpSolution:
    """Solver output; ``y`` is always populated with the best iterate found."""

    y: np.ndarray
    status: str
    objective: float
    eq_residual: float
    min_block_eig: float
    iterations: int
    message: str = ""
    gap: float = float("nan")
    solve_seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status in (OPTIMAL, FEASIBLE)


def check_psd(m: np.ndarray, tol: float) -> tuple[bool, float]:
    """Whether the symmetric matrix has smallest eigenvalue >= -tol, and that eigenvalue."""
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("check_psd expects a square matrix")
    if m.shape[0] and np.max(np.abs(m - m.T)) > 1e-10:
        raise ValueError("check_psd expects a symmetric matrix")
    if m.shape[0] == 0:
        return True, 0.0
    lam = float(np.linalg.eigvalsh(0.5 * (m + m.T))[0])
    return lam >= -tol, lam


def dump_sdpa(problem: SdpProblem, path: str) -> None:
    """Write the problem in the sparse SDPA text format for external cross-checks.

    Equalities are encoded as a paired diagonal block (each row twice, with
    opposite signs), since the format has no native equality section.
    """
    m_eq = problem.eq_g.shape[0]
    blocks = [b.size for b in problem.blocks]
    if m_eq:
        blocks.append(-2 * m_eq)  # negative size marks a diagonal block
    lines = []
    lines.append(f"{problem.n_vars} = mDIM")
    lines.append(f"{len(blocks)} = nBLOCK")
    lines.append(" ".join(str(s) for s in blocks) + " = bLOCKsTRUCT")
    lines.append(" ".join(f"{v:.17g}" for v in -problem.objective))

    def emit(var: int, blk: int, i: int, j: int, v: float):
        # SDPA wants upper-triangle 1-based entries of F_var in block blk.
        if abs(v) == 0.0:
            return
        lines.append(f"{var} {blk} {j + 1} {i + 1} {v:.17g}")

    for bi, b in enumerate(problem.blocks, start=1):
        if isinstance(b, GramBlock):
            ii, jj = tri_coords(b.size)
            for k in range(b.n_vars):
                emit(b.var_offset + k + 1, bi, int(ii[k]), int(jj[k]), 1.0)
        else:
            for i, j, v in b.const:
                emit(0, bi, i, j, -v)  # SDPA convention: sum y_i F_i - F0 >= 0
            for k, i, j, v in b.terms:
                emit(k + 1, bi, i, j, v)
    if m_eq:
        bi = len(blocks)
        g = problem.eq_g.tocoo()
        for r, k, v in zip(g.row, g.col, g.data):
            emit(int(k) + 1, bi, int(r), int(r), v)
            emit(int(k) + 1, bi, m_eq + int(r), m_eq + int(r), -v)
        for r, v in enumerate(problem.eq_h):
            emit(0, bi, r, r, v)
            emit(0, bi, m_eq + r, m_eq + r, -v)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
