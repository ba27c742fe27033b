"""Reduction of the block-LMI problem form to a primal conic program.

Gram blocks already are matrix variables, so their decision coordinates are
replaced by primal PSD variables directly. Each affine block gets a PSD slack
variable pinned to its affine expression by one linking equality per lower
triangle position. Decision variables not owned by any Gram block stay as free
scalars. The result is

    find / min  sum_b <C_b, X_b> + c_f^T x_f
    subject to  sum_b <A_rb, X_b> + a_f[r, :] x_f = b_r,   X_b psd,

with every constraint matrix stored in the folded entry form of
:mod:`dissicert.sdp.kernels`. Rows are equilibrated to unit max coefficient;
structurally empty rows are dropped when their right-hand side is zero and
reported as inconsistent otherwise, so a contradictory equality never reaches
the interior-point iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .problem import AffineBlock, GramBlock, SdpProblem, tri_coords

DROP_TOL = 1e-12


@dataclass
class BlockEntries:
    """One PSD block: constraint entries in folded gather form plus objective."""

    size: int
    rows: np.ndarray
    ci: np.ndarray
    cj: np.ndarray
    cv: np.ndarray
    cmat: np.ndarray


@dataclass
class ConicProgram:
    blocks: list[BlockEntries]
    a_free: np.ndarray
    c_free: np.ndarray
    b: np.ndarray
    row_scale: np.ndarray
    var_map: list[tuple]
    n_vars: int
    infeasible_rows: list[int] = field(default_factory=list)
    n_dropped: int = 0

    @property
    def n_rows(self) -> int:
        return self.b.shape[0]


def build_conic(problem: SdpProblem, drop_tol: float = DROP_TOL) -> ConicProgram:
    n = problem.n_vars
    owner = np.full(n, -1, dtype=np.int64)
    pos_i = np.zeros(n, dtype=np.int64)
    pos_j = np.zeros(n, dtype=np.int64)

    sizes: list[int] = []
    slack_of: dict[int, int] = {}
    for pb_index, blk in enumerate(problem.blocks):
        bi = len(sizes)
        sizes.append(blk.size)
        if isinstance(blk, GramBlock):
            ii, jj = tri_coords(blk.size)
            span = slice(blk.var_offset, blk.var_offset + blk.n_vars)
            owner[span] = bi
            pos_i[span] = ii
            pos_j[span] = jj
        else:
            slack_of[pb_index] = bi

    free_col = np.full(n, -1, dtype=np.int64)
    free_vars = np.flatnonzero(owner < 0)
    free_col[free_vars] = np.arange(free_vars.size)
    nf = free_vars.size

    var_map: list[tuple] = []
    for k in range(n):
        if owner[k] >= 0:
            var_map.append(("gram", int(owner[k]), int(pos_i[k]), int(pos_j[k])))
        else:
            var_map.append(("free", int(free_col[k])))

    ent_rows = [[] for _ in sizes]
    ent_i = [[] for _ in sizes]
    ent_j = [[] for _ in sizes]
    ent_v = [[] for _ in sizes]
    af_r: list[int] = []
    af_c: list[int] = []
    af_v: list[float] = []
    bvec: list[float] = []
    infeasible_rows: list[int] = []
    n_dropped = 0
    r = 0

    def push_var(k, coef, acc, facc):
        if owner[k] >= 0:
            key = (int(owner[k]), int(pos_i[k]), int(pos_j[k]))
            acc[key] = acc.get(key, 0.0) + coef
        else:
            col = int(free_col[k])
            facc[col] = facc.get(col, 0.0) + coef

    def emit_row(acc, facc, rhs, origin):
        nonlocal r, n_dropped
        acc = {k: v for k, v in acc.items() if v != 0.0}
        facc = {k: v for k, v in facc.items() if v != 0.0}
        if not acc and not facc:
            if abs(rhs) > drop_tol:
                infeasible_rows.append(origin)
            else:
                n_dropped += 1
            return
        for (bi, i, j), v in acc.items():
            ent_rows[bi].append(r)
            ent_i[bi].append(i)
            ent_j[bi].append(j)
            ent_v[bi].append(v)
        for col, v in facc.items():
            af_r.append(r)
            af_c.append(col)
            af_v.append(v)
        bvec.append(rhs)
        r += 1

    g = problem.eq_g.tocsr()
    for r0 in range(g.shape[0]):
        lo, hi = g.indptr[r0], g.indptr[r0 + 1]
        acc: dict = {}
        facc: dict = {}
        for k, v in zip(g.indices[lo:hi], g.data[lo:hi]):
            push_var(int(k), float(v), acc, facc)
        emit_row(acc, facc, float(problem.eq_h[r0]), r0)

    for pb_index, blk in enumerate(problem.blocks):
        if not isinstance(blk, AffineBlock):
            continue
        sbi = slack_of[pb_index]
        f0 = {(i, j): v for i, j, v in blk.const}
        per_pos: dict[tuple[int, int], list[tuple[int, float]]] = {}
        for k, i, j, v in blk.terms:
            per_pos.setdefault((i, j), []).append((k, v))
        ii, jj = tri_coords(blk.size)
        for i, j in zip(ii, jj):
            acc = {(sbi, int(i), int(j)): 1.0}
            facc: dict = {}
            for k, v in per_pos.get((int(i), int(j)), ()):
                push_var(k, -float(v), acc, facc)
            emit_row(acc, facc, f0.get((int(i), int(j)), 0.0), -1)

    m = r
    b = np.asarray(bvec, dtype=float)
    rowmax = np.zeros(m)
    for bi in range(len(sizes)):
        if ent_rows[bi]:
            np.maximum.at(rowmax, np.asarray(ent_rows[bi]), np.abs(np.asarray(ent_v[bi])))
    if af_r:
        np.maximum.at(rowmax, np.asarray(af_r), np.abs(np.asarray(af_v)))
    scale = 1.0 / np.where(rowmax > 0, rowmax, 1.0)

    blocks: list[BlockEntries] = []
    for bi, size in enumerate(sizes):
        rows = np.asarray(ent_rows[bi], dtype=np.int64)
        order = np.argsort(rows, kind="stable")
        rows = rows[order]
        ci = np.asarray(ent_i[bi], dtype=np.int64)[order]
        cj = np.asarray(ent_j[bi], dtype=np.int64)[order]
        cv = (np.asarray(ent_v[bi], dtype=float)[order]) * scale[rows]
        blocks.append(BlockEntries(size, rows, ci, cj, cv, np.zeros((size, size))))

    a_free = np.zeros((m, nf))
    if af_r:
        np.add.at(a_free, (np.asarray(af_r), np.asarray(af_c)), np.asarray(af_v))
        a_free *= scale[:, None]
    b = b * scale

    c_free = np.zeros(nf)
    for k in np.flatnonzero(problem.objective):
        ck = float(problem.objective[k])
        tag = var_map[k]
        if tag[0] == "gram":
            _, bi, i, j = tag
            if i == j:
                blocks[bi].cmat[i, i] += ck
            else:
                blocks[bi].cmat[i, j] += 0.5 * ck
                blocks[bi].cmat[j, i] += 0.5 * ck
        else:
            c_free[tag[1]] += ck

    return ConicProgram(
        blocks=blocks,
        a_free=a_free,
        c_free=c_free,
        b=b,
        row_scale=scale,
        var_map=var_map,
        n_vars=n,
        infeasible_rows=infeasible_rows,
        n_dropped=n_dropped,
    )
