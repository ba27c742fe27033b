"""Sum-of-squares programming layer.

Builds semidefinite programs whose decision variables are coefficients of
polynomials. The two central objects are :class:`AffExpr`, an affine scalar
expression in the program's decision variables, and :class:`AffPoly`, a
polynomial whose coefficients are such expressions. Declaring a polynomial
(or polynomial matrix) as a sum of squares introduces a Gram matrix variable
over a full graded monomial basis and one linear matching row per monomial;
monomials reachable by the basis but absent from the expression are matched
to zero rather than skipped.

Everything is allocated eagerly in call order, so compiling the same program
twice produces byte-identical data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .polyalg import ContextMismatch, Monomial, Polynomial, VarContext, monomial_basis
from .sdp import AffineBlock, GramBlock, SdpProblem, SdpSolution, tri_index
from .sdp import solve as sdp_solve

SYMMETRY_TOL = 1e-10
CERT_RESIDUAL_TOL = 1e-8


class AffExpr:
    """Affine expression c0 + sum_k coeff_k * y_k over program decision variables."""

    __slots__ = ("terms", "const")

    def __init__(self, terms: dict[int, float] | None = None, const: float = 0.0):
        self.terms = terms if terms is not None else {}
        self.const = float(const)

    @classmethod
    def variable(cls, idx: int) -> "AffExpr":
        return cls({idx: 1.0})

    @classmethod
    def lift(cls, other) -> "AffExpr":
        if isinstance(other, AffExpr):
            return other
        if isinstance(other, (int, float)):
            return cls(const=float(other))
        raise TypeError(f"cannot interpret {type(other).__name__} as an affine expression")

    def copy(self) -> "AffExpr":
        return AffExpr(dict(self.terms), self.const)

    def scaled(self, s: float) -> "AffExpr":
        if s == 0.0:
            return AffExpr()
        return AffExpr({k: v * s for k, v in self.terms.items()}, self.const * s)

    def __add__(self, other):
        other = AffExpr.lift(other)
        out = dict(self.terms)
        for k, v in other.terms.items():
            out[k] = out.get(k, 0.0) + v
        return AffExpr(out, self.const + other.const)

    __radd__ = __add__

    def __neg__(self):
        return self.scaled(-1.0)

    def __sub__(self, other):
        return self + AffExpr.lift(other).scaled(-1.0)

    def __rsub__(self, other):
        return AffExpr.lift(other) + self.scaled(-1.0)

    def __mul__(self, s):
        if not isinstance(s, (int, float)):
            raise TypeError("affine expressions only scale by numbers; products of variables are not representable")
        return self.scaled(float(s))

    __rmul__ = __mul__

    def add_scaled(self, other: "AffExpr", s: float) -> None:
        """In-place self += s * other, for accumulation loops."""
        if s == 0.0:
            return
        t = self.terms
        for k, v in other.terms.items():
            t[k] = t.get(k, 0.0) + v * s
        self.const += other.const * s

    def value(self, y: np.ndarray) -> float:
        return self.const + sum(v * y[k] for k, v in self.terms.items())

    def max_abs(self) -> float:
        vals = [abs(self.const)] + [abs(v) for v in self.terms.values()]
        return max(vals)

    def is_zero(self, tol: float = 0.0) -> bool:
        return self.max_abs() <= tol

    def __repr__(self):
        parts = [f"{v:g}*y{k}" for k, v in sorted(self.terms.items())]
        if self.const or not parts:
            parts.append(f"{self.const:g}")
        return " + ".join(parts)


class AffPoly:
    """Polynomial with affine-expression coefficients over a shared context."""

    __slots__ = ("ctx", "coeffs")

    def __init__(self, ctx: VarContext, coeffs: dict[Monomial, AffExpr] | None = None):
        self.ctx = ctx
        self.coeffs = coeffs if coeffs is not None else {}

    @classmethod
    def from_poly(cls, p: Polynomial) -> "AffPoly":
        return cls(p.ctx, {m: AffExpr(const=c) for m, c in p.terms.items()})

    @classmethod
    def zero(cls, ctx: VarContext) -> "AffPoly":
        return cls(ctx)

    @property
    def degree(self) -> int:
        degs = [m.degree for m, e in self.coeffs.items() if not e.is_zero()]
        return max(degs, default=0)

    def coefficient(self, mono: Monomial) -> AffExpr:
        return self.coeffs.get(mono, AffExpr())

    def _check_ctx(self, other):
        if self.ctx is not other.ctx:
            raise ContextMismatch("polynomials belong to different variable contexts")

    def copy(self) -> "AffPoly":
        return AffPoly(self.ctx, {m: e.copy() for m, e in self.coeffs.items()})

    def __add__(self, other):
        out = self.copy()
        out.accumulate(other)
        return out

    def __sub__(self, other):
        out = self.copy()
        out.accumulate(other, scale=-1.0)
        return out

    def __neg__(self):
        return AffPoly(self.ctx, {m: e.scaled(-1.0) for m, e in self.coeffs.items()})

    def accumulate(self, other, scale: float = 1.0, times: Polynomial | None = None) -> None:
        """In-place self += scale * times * other; `other` may be AffPoly or Polynomial."""
        if isinstance(other, Polynomial):
            other = AffPoly.from_poly(other)
        if not isinstance(other, AffPoly):
            raise TypeError(f"cannot add {type(other).__name__} to a coefficient polynomial")
        self._check_ctx(other)
        if times is not None and times.ctx is not self.ctx:
            raise ContextMismatch("multiplier polynomial belongs to a different context")
        dst = self.coeffs
        if times is None:
            for m, e in other.coeffs.items():
                tgt = dst.get(m)
                if tgt is None:
                    dst[m] = e.scaled(scale)
                else:
                    tgt.add_scaled(e, scale)
        else:
            for tm, tc in times.terms.items():
                for m, e in other.coeffs.items():
                    key = tm.mul(m)
                    tgt = dst.get(key)
                    if tgt is None:
                        dst[key] = e.scaled(scale * tc)
                    else:
                        tgt.add_scaled(e, scale * tc)

    def mul_poly(self, p: Polynomial) -> "AffPoly":
        out = AffPoly(self.ctx)
        out.accumulate(self, times=p)
        return out

    def __mul__(self, other):
        if isinstance(other, Polynomial):
            return self.mul_poly(other)
        if isinstance(other, (int, float)):
            return AffPoly(self.ctx, {m: e.scaled(float(other)) for m, e in self.coeffs.items()})
        raise TypeError("coefficient polynomials multiply by plain polynomials or numbers only")

    __rmul__ = __mul__

    def value(self, y: np.ndarray) -> Polynomial:
        return Polynomial(self.ctx, {m: e.value(y) for m, e in self.coeffs.items()})

    def __repr__(self):
        items = sorted(self.coeffs.items(), key=lambda kv: kv[0].sort_key())
        return " + ".join(f"({e})*{_mono_str(m, self.ctx)}" for m, e in items) or "0"


def _mono_str(m: Monomial, ctx: VarContext) -> str:
    parts = [
        name if e == 1 else f"{name}^{e}"
        for name, e in zip(ctx.names, m.exps)
        if e
    ]
    return "*".join(parts) if parts else "1"


@dataclass
class GramCertificate:
    """Recovered PSD witness for one declared constraint."""

    label: str
    kind: str
    basis: list[Monomial] | None
    matrix: np.ndarray
    residual: float
    min_eig: float

    @property
    def ok(self) -> bool:
        return self.residual <= CERT_RESIDUAL_TOL


class SosProgram:
    """Incrementally built SOS feasibility/optimization program."""

    def __init__(self):
        self._n_vars = 0
        self._blocks: list = []
        self._rows: list[tuple[dict[int, float], float]] = []
        self._objective: AffExpr | None = None
        self._gram_records: list[dict] = []

    @property
    def n_vars(self) -> int:
        return self._n_vars

    @property
    def n_rows(self) -> int:
        return len(self._rows)

    def _alloc(self, count: int) -> int:
        off = self._n_vars
        self._n_vars += count
        return off

    # ----- variable constructors -------------------------------------------------

    def add_scalar(self, nonneg: bool = False, label: str | None = None) -> AffExpr:
        off = self._alloc(1)
        if nonneg:
            self._blocks.append(GramBlock(1, off))
            self._gram_records.append(
                {"label": label or f"scalar{off}", "kind": "scalar", "basis": None, "block": self._blocks[-1], "expr": None}
            )
        return AffExpr.variable(off)

    def add_psd_matrix(self, n: int, label: str | None = None) -> list[list[AffExpr]]:
        if n < 1:
            raise ValueError("matrix side must be positive")
        off = self._alloc(n * (n + 1) // 2)
        block = GramBlock(n, off)
        self._blocks.append(block)
        self._gram_records.append(
            {"label": label or f"psd{off}", "kind": "psd", "basis": None, "block": block, "expr": None}
        )
        mat = [[AffExpr.variable(off + tri_index(i, j)) for j in range(n)] for i in range(n)]
        return mat

    def _gram_poly(self, ctx, names, half_degree, r=1):
        basis = monomial_basis(ctx, names, half_degree)
        size = len(basis) * r
        off = self._alloc(size * (size + 1) // 2)
        return basis, GramBlock(size, off)

    def add_sos_poly(self, ctx: VarContext, names, degree: int, label: str | None = None,
                     basis: list[Monomial] | None = None) -> AffPoly:
        if degree < 0 or degree % 2:
            raise ValueError("an SOS polynomial needs an even nonnegative degree")
        if basis is None:
            basis = monomial_basis(ctx, names, degree // 2)
        block = GramBlock(len(basis), self._alloc(len(basis) * (len(basis) + 1) // 2))
        self._blocks.append(block)
        self._gram_records.append(
            {"label": label or f"sos{block.var_offset}", "kind": "sos", "basis": basis, "block": block, "expr": None}
        )
        out = AffPoly(ctx)
        q = len(basis)
        for k in range(q):
            for l in range(k, q):
                mono = basis[k].mul(basis[l])
                var = block.var_offset + tri_index(l, k)
                w = 1.0 if k == l else 2.0
                tgt = out.coeffs.get(mono)
                if tgt is None:
                    out.coeffs[mono] = AffExpr({var: w})
                else:
                    tgt.add_scaled(AffExpr({var: 1.0}), w)
        return out

    def add_free_poly(self, ctx: VarContext, names, degree: int) -> AffPoly:
        basis = monomial_basis(ctx, names, degree)
        off = self._alloc(len(basis))
        return AffPoly(ctx, {m: AffExpr.variable(off + k) for k, m in enumerate(basis)})

    def add_sos_matrix(self, r: int, ctx: VarContext, names, degree: int, label: str | None = None) -> list[list[AffPoly]]:
        if r < 1:
            raise ValueError("matrix side must be positive")
        if degree < 0 or degree % 2:
            raise ValueError("an SOS matrix needs an even nonnegative degree")
        basis, block = self._gram_poly(ctx, names, degree // 2, r)
        self._blocks.append(block)
        self._gram_records.append(
            {"label": label or f"sosmat{block.var_offset}", "kind": "sos_matrix", "basis": basis, "block": block,
             "expr": None, "side": r}
        )
        q = len(basis)
        mat = [[AffPoly(ctx) for _ in range(r)] for _ in range(r)]
        for a in range(r):
            for bb in range(a, r):
                entry = mat[a][bb]
                for k in range(q):
                    for l in range(q):
                        i = k * r + a
                        j = l * r + bb
                        var = block.var_offset + tri_index(i, j)
                        mono = basis[k].mul(basis[l])
                        tgt = entry.coeffs.get(mono)
                        if tgt is None:
                            entry.coeffs[mono] = AffExpr({var: 1.0})
                        else:
                            tgt.add_scaled(AffExpr({var: 1.0}), 1.0)
                if bb != a:
                    mat[bb][a] = entry
        return mat

    # ----- constraints -----------------------------------------------------------

    def _add_row(self, terms: dict[int, float], rhs: float) -> None:
        self._rows.append(({k: v for k, v in terms.items() if v != 0.0}, float(rhs)))

    def constrain_eq(self, expr) -> None:
        """Pin an affine expression (or every coefficient of a polynomial) to zero."""
        if isinstance(expr, AffPoly):
            for m, e in sorted(expr.coeffs.items(), key=lambda kv: kv[0].sort_key()):
                self._add_row(dict(e.terms), -e.const)
        else:
            e = AffExpr.lift(expr)
            self._add_row(dict(e.terms), -e.const)

    def constrain_sos(self, expr: AffPoly, degree: int | None = None, label: str | None = None) -> int:
        """Require expr to be a sum of squares; returns the certificate index."""
        if degree is None:
            degree = expr.degree
        half = math.ceil(degree / 2)
        names = [n for n, present in zip(expr.ctx.names, _used_vars(expr)) if present]
        basis = prune_sos_basis(monomial_basis(expr.ctx, names, half), set(expr.coeffs))
        q = len(basis)
        if q:
            off = self._alloc(q * (q + 1) // 2)
            block = GramBlock(q, off)
            self._blocks.append(block)
        else:
            off, block = self._n_vars, None
        rows: dict[Monomial, dict[int, float]] = {}
        for k in range(q):
            for l in range(k, q):
                mono = basis[k].mul(basis[l])
                var = off + tri_index(l, k)
                row = rows.setdefault(mono, {})
                row[var] = row.get(var, 0.0) + (1.0 if k == l else 2.0)
        seen = set(rows)
        for mono in expr.coeffs:
            if mono not in seen:
                rows[mono] = {}
        for mono in sorted(rows, key=lambda m: m.sort_key()):
            row = rows[mono]
            e = expr.coeffs.get(mono)
            if e is not None:
                for k, v in e.terms.items():
                    row[k] = row.get(k, 0.0) - v
                rhs = e.const
            else:
                rhs = 0.0
            self._add_row(row, rhs)
        self._gram_records.append(
            {"label": label or f"sos{off}", "kind": "sos", "basis": basis, "block": block, "expr": expr}
        )
        return len(self._gram_records) - 1

    def constrain_sos_matrix(self, mat: list[list[AffPoly]], degree: int | None = None, label: str | None = None) -> int:
        """Require a symmetric polynomial matrix to be an SOS matrix."""
        r = len(mat)
        ctx = mat[0][0].ctx
        for a in range(r):
            if len(mat[a]) != r:
                raise ValueError("matrix must be square")
            for bb in range(r):
                if mat[a][bb].ctx is not ctx:
                    raise ContextMismatch("matrix entries belong to different variable contexts")
        for a in range(r):
            for bb in range(a + 1, r):
                d = mat[a][bb] - mat[bb][a]
                worst = max((e.max_abs() for e in d.coeffs.values()), default=0.0)
                if worst > SYMMETRY_TOL:
                    raise ValueError(f"matrix is not symmetric: entries ({a},{bb}) differ by {worst:.2e}")
        if degree is None:
            degree = max(mat[a][bb].degree for a in range(r) for bb in range(r))
        half = math.ceil(degree / 2)
        used = [False] * len(ctx.names)
        for a in range(r):
            for bb in range(r):
                for flag_idx, flag in enumerate(_used_vars(mat[a][bb])):
                    used[flag_idx] = used[flag_idx] or flag
        names = [n for n, present in zip(ctx.names, used) if present]
        union_support = {m for a in range(r) for bb in range(r) for m in mat[a][bb].coeffs}
        basis = prune_sos_basis(monomial_basis(ctx, names, half), union_support)
        q = len(basis)
        size = q * r
        if size:
            off = self._alloc(size * (size + 1) // 2)
            block = GramBlock(size, off)
            self._blocks.append(block)
        else:
            off, block = self._n_vars, None
        for a in range(r):
            for bb in range(a, r):
                rows: dict[Monomial, dict[int, float]] = {}
                for k in range(q):
                    for l in range(q):
                        mono = basis[k].mul(basis[l])
                        var = off + tri_index(k * r + a, l * r + bb)
                        row = rows.setdefault(mono, {})
                        row[var] = row.get(var, 0.0) + 1.0
                expr = mat[a][bb]
                for mono in expr.coeffs:
                    rows.setdefault(mono, {})
                for mono in sorted(rows, key=lambda m: m.sort_key()):
                    row = rows[mono]
                    e = expr.coeffs.get(mono)
                    if e is not None:
                        for k, v in e.terms.items():
                            row[k] = row.get(k, 0.0) - v
                        rhs = e.const
                    else:
                        rhs = 0.0
                    self._add_row(row, rhs)
        self._gram_records.append(
            {"label": label or f"sosmat{off}", "kind": "sos_matrix", "basis": basis, "block": block,
             "expr": mat, "side": r}
        )
        return len(self._gram_records) - 1

    def constrain_psd(self, mat, shift: float = 0.0, label: str | None = None) -> int:
        """Require a symmetric matrix of affine expressions to be PSD (minus a shift)."""
        r = len(mat)
        entries = [[AffExpr.lift(mat[i][j]) for j in range(len(mat[i]))] for i in range(r)]
        for i in range(r):
            if len(entries[i]) != r:
                raise ValueError("matrix must be square")
        for i in range(r):
            for j in range(i + 1, r):
                if (entries[i][j] - entries[j][i]).max_abs() > SYMMETRY_TOL:
                    raise ValueError(f"matrix is not symmetric at ({i},{j})")
        const = []
        terms = []
        for i in range(r):
            for j in range(i + 1):
                e = entries[i][j]
                c = e.const - (shift if i == j else 0.0)
                if c != 0.0:
                    const.append((i, j, c))
                for k in sorted(e.terms):
                    v = e.terms[k]
                    if v != 0.0:
                        terms.append((k, i, j, v))
        block = AffineBlock(r, const=tuple(const), terms=tuple(terms))
        self._blocks.append(block)
        self._gram_records.append(
            {"label": label or f"psd{len(self._gram_records)}", "kind": "psd_constraint", "basis": None,
             "block": block, "expr": entries}
        )
        return len(self._gram_records) - 1

    def minimize(self, expr: AffExpr) -> None:
        if self._objective is not None:
            raise ValueError("objective already set")
        self._objective = AffExpr.lift(expr).copy()

    # ----- compilation and solving -------------------------------------------------

    @property
    def block_sizes(self) -> tuple[int, ...]:
        return tuple(b.size for b in self._blocks)

    def compile(self) -> SdpProblem:
        obj = np.zeros(self._n_vars)
        if self._objective is not None:
            for k, v in self._objective.terms.items():
                obj[k] += v
        data, ri, ci = [], [], []
        h = np.zeros(len(self._rows))
        for r, (row, rhs) in enumerate(self._rows):
            h[r] = rhs
            for k in sorted(row):
                ri.append(r)
                ci.append(k)
                data.append(row[k])
        g = sp.csr_matrix((data, (ri, ci)), shape=(len(self._rows), self._n_vars))
        return SdpProblem(self._n_vars, obj, list(self._blocks), g, h)

    def solve(self, **kwargs) -> SdpSolution:
        return sdp_solve(self.compile(), **kwargs)

    def value(self, y: np.ndarray, expr):
        if isinstance(expr, AffPoly):
            return expr.value(y)
        if isinstance(expr, AffExpr):
            return expr.value(y)
        if isinstance(expr, list):
            return [self.value(y, e) for e in expr]
        raise TypeError(f"cannot evaluate {type(expr).__name__}")

    def objective_value(self, y: np.ndarray) -> float:
        if self._objective is None:
            return 0.0
        return self._objective.value(y)

    def certificates(self, y: np.ndarray) -> list[GramCertificate]:
        """Recover every declared PSD/Gram witness at the solution point."""
        out = []
        for rec in self._gram_records:
            block = rec["block"]
            if block is None:
                mval = np.zeros((0, 0))
            elif isinstance(block, GramBlock):
                n = block.size
                mval = np.zeros((n, n))
                for i in range(n):
                    for j in range(i + 1):
                        mval[i, j] = mval[j, i] = y[block.var_offset + tri_index(i, j)]
            else:
                mval = block.eval(y)
            min_eig = float(np.linalg.eigvalsh(mval)[0]) if mval.size else 0.0
            residual = 0.0
            if rec["kind"] == "sos" and rec["expr"] is not None:
                residual = self._sos_residual(rec, mval, y)
            elif rec["kind"] == "sos_matrix" and rec["expr"] is not None:
                residual = self._sos_matrix_residual(rec, mval, y)
            out.append(
                GramCertificate(
                    label=rec["label"],
                    kind=rec["kind"],
                    basis=rec["basis"],
                    matrix=mval,
                    residual=residual,
                    min_eig=min_eig,
                )
            )
        return out

    def _sos_residual(self, rec, mval, y) -> float:
        basis = rec["basis"]
        expr = rec["expr"]
        target = expr.value(y)
        recon: dict[Monomial, float] = {}
        q = len(basis)
        for k in range(q):
            for l in range(q):
                mono = basis[k].mul(basis[l])
                recon[mono] = recon.get(mono, 0.0) + mval[k, l]
        worst = 0.0
        for mono in set(recon) | set(target.terms):
            worst = max(worst, abs(recon.get(mono, 0.0) - target.coefficient(mono)))
        return worst

    def _sos_matrix_residual(self, rec, mval, y) -> float:
        basis = rec["basis"]
        mat = rec["expr"]
        r = rec["side"]
        q = len(basis)
        worst = 0.0
        for a in range(r):
            for bb in range(a, r):
                target = mat[a][bb].value(y)
                recon: dict[Monomial, float] = {}
                for k in range(q):
                    for l in range(q):
                        mono = basis[k].mul(basis[l])
                        recon[mono] = recon.get(mono, 0.0) + mval[k * r + a, l * r + bb]
                for mono in set(recon) | set(target.terms):
                    worst = max(worst, abs(recon.get(mono, 0.0) - target.coefficient(mono)))
        return worst


def _used_vars(expr: AffPoly) -> list[bool]:
    used = [False] * len(expr.ctx.names)
    for m in expr.coeffs:
        for i, e in enumerate(m.exps):
            if e:
                used[i] = True
    return used


def prune_sos_basis(basis: list[Monomial], support: set[Monomial]) -> list[Monomial]:
    """Drop Gram-basis monomials that cannot take part in any decomposition.

    Two sound reductions. First, a basis monomial whose square leaves the
    coordinate-wise and total-degree bounds of the target support cannot lie in
    half the support's Newton polytope. Second, a basis monomial whose square
    neither occurs in the support nor equals the product of two other surviving
    basis monomials has a forced-zero diagonal Gram entry, and a PSD matrix with
    a zero diagonal entry has a zero row; remove and iterate to a fixed point.
    Neither step changes the feasible set of the matching constraints.
    """
    if not support:
        return []
    nvars = len(next(iter(support)).exps)
    cap = [0] * nvars
    lo, hi = None, 0
    for mono in support:
        for i, e in enumerate(mono.exps):
            if e > cap[i]:
                cap[i] = e
        d = mono.degree
        hi = max(hi, d)
        lo = d if lo is None else min(lo, d)
    alive = [
        b
        for b in basis
        if lo <= 2 * b.degree <= hi and all(2 * e <= c for e, c in zip(b.exps, cap))
    ]
    while True:
        pair_products = set()
        for i, b1 in enumerate(alive):
            for b2 in alive[i + 1 :]:
                pair_products.add(b1.mul(b2))
        kept = [b for b in alive if b.mul(b) in support or b.mul(b) in pair_products]
        if len(kept) == len(alive):
            return kept
        alive = kept
