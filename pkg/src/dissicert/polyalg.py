"""Sparse multivariate polynomials and polynomial matrices over shared variable contexts.

Every polynomial references an immutable :class:`VarContext`; mixing contexts is a hard
error rather than a silent unification. Coefficients below ``DROP_TOL`` are dropped
after every arithmetic operation so that downstream coefficient matching never sees
numerical dust.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DROP_TOL = 1e-12


class ContextMismatch(ValueError):
    """Raised when polynomials from different variable contexts are combined."""


class MissingMonomial(ValueError):
    """Raised when a template lacks a required state or input monomial."""


class ParseError(ValueError):
    """Polynomial parser error carrying line and column information."""

    def __init__(self, message, line, col):
        super().__init__(f"{message} (line {line}, column {col})")
        self.line = line
        self.col = col


class VarContext:
    """Ordered, immutable collection of variable names.

    Parameters
    ----------
    names : iterable of str
        Variable names in their fixed order, e.g. ``["x1", "x2", "u1"]``.
    """

    __slots__ = ("names", "_index")

    def __init__(self, names: Iterable[str]):
        names = tuple(names)
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate variable names in {names}")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "_index", {n: i for i, n in enumerate(names)})

    def __setattr__(self, *a):
        raise AttributeError("VarContext is immutable")

    def __len__(self):
        return len(self.names)

    def __repr__(self):
        return f"VarContext({list(self.names)})"

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"unknown variable {name!r} in context {self.names}") from None

    def indices(self, names: Iterable[str]) -> tuple[int, ...]:
        return tuple(self.index(n) for n in names)


@dataclass(frozen=True)
class Monomial:
    """Exponent vector of one monomial; its length equals the context size."""

    exps: tuple[int, ...]

    @property
    def degree(self) -> int:
        return sum(self.exps)

    def mul(self, other: "Monomial") -> "Monomial":
        return Monomial(tuple(a + b for a, b in zip(self.exps, other.exps)))

    def sort_key(self):
        # graded lexicographic: degree first, then lexicographically descending
        # exponent tuples, which yields 1, x1, x2, x1^2, x1*x2, x2^2, ...
        return (self.degree, tuple(-e for e in self.exps))

    def eval(self, point: np.ndarray) -> float:
        v = 1.0
        for x, e in zip(point, self.exps):
            if e:
                v *= x**e
        return v


def _one(nv: int) -> Monomial:
    return Monomial((0,) * nv)


class Polynomial:
    """Sparse multivariate polynomial: a map from :class:`Monomial` to coefficient."""

    __slots__ = ("ctx", "terms")

    def __init__(self, ctx: VarContext, terms: Mapping[Monomial, float] | None = None):
        self.ctx = ctx
        cleaned = {}
        if terms:
            for mono, c in terms.items():
                if len(mono.exps) != len(ctx):
                    raise ValueError("monomial length does not match context size")
                c = float(c)
                if abs(c) > DROP_TOL:
                    cleaned[mono] = c
        self.terms = cleaned

    # -- constructors -------------------------------------------------------

    @classmethod
    def zero(cls, ctx: VarContext) -> "Polynomial":
        return cls(ctx, {})

    @classmethod
    def constant(cls, ctx: VarContext, c: float) -> "Polynomial":
        return cls(ctx, {_one(len(ctx)): float(c)})

    @classmethod
    def variable(cls, ctx: VarContext, name: str) -> "Polynomial":
        exps = [0] * len(ctx)
        exps[ctx.index(name)] = 1
        return cls(ctx, {Monomial(tuple(exps)): 1.0})

    @classmethod
    def from_monomial(cls, ctx: VarContext, mono: Monomial, c: float = 1.0) -> "Polynomial":
        return cls(ctx, {mono: float(c)})

    # -- queries ------------------------------------------------------------

    @property
    def degree(self) -> int:
        """Degree of the polynomial; the zero polynomial has degree 0."""
        return max((m.degree for m in self.terms), default=0)

    def is_zero(self) -> bool:
        return not self.terms

    def is_monomial(self) -> bool:
        return len(self.terms) == 1 and abs(next(iter(self.terms.values())) - 1.0) <= DROP_TOL

    def coefficient(self, mono: Monomial) -> float:
        return self.terms.get(mono, 0.0)

    def sorted_terms(self):
        return sorted(self.terms.items(), key=lambda kv: kv[0].sort_key())

    # -- arithmetic ---------------------------------------------------------

    def _check(self, other: "Polynomial"):
        if self.ctx is not other.ctx:
            raise ContextMismatch("polynomials belong to different variable contexts")

    def __add__(self, other):
        if isinstance(other, (int, float)):
            other = Polynomial.constant(self.ctx, other)
        self._check(other)
        out = dict(self.terms)
        for m, c in other.terms.items():
            out[m] = out.get(m, 0.0) + c
        return Polynomial(self.ctx, out)

    __radd__ = __add__

    def __neg__(self):
        return Polynomial(self.ctx, {m: -c for m, c in self.terms.items()})

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            other = Polynomial.constant(self.ctx, other)
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return Polynomial(self.ctx, {m: c * other for m, c in self.terms.items()})
        self._check(other)
        out: dict[Monomial, float] = {}
        for m1, c1 in self.terms.items():
            for m2, c2 in other.terms.items():
                m = m1.mul(m2)
                out[m] = out.get(m, 0.0) + c1 * c2
        return Polynomial(self.ctx, out)

    __rmul__ = __mul__

    def __pow__(self, k: int):
        if not isinstance(k, int) or k < 0:
            raise ValueError("polynomial powers must be nonnegative integers")
        out = Polynomial.constant(self.ctx, 1.0)
        base = self
        while k:
            if k & 1:
                out = out * base
            base = base * base if k > 1 else base
            k >>= 1
        return out

    def __eq__(self, other):
        if not isinstance(other, Polynomial):
            return NotImplemented
        return self.ctx is other.ctx and self.terms == other.terms

    def __hash__(self):
        return hash((id(self.ctx), frozenset(self.terms.items())))

    # -- evaluation and substitution ----------------------------------------

    def eval(self, point: Sequence[float]) -> float:
        """Numeric value of the polynomial at ``point`` (one value per context variable)."""
        point = np.asarray(point, dtype=float)
        if point.shape != (len(self.ctx),):
            raise ValueError(
                f"point has {point.shape} entries, context has {len(self.ctx)} variables"
            )
        return float(sum(c * m.eval(point) for m, c in self.terms.items()))

    def substitute(self, bindings: Mapping[str, "Polynomial"]) -> "Polynomial":
        """Compose with ``bindings``; unbound variables pass through.

        All replacement polynomials must share one target context. Unbound
        variables of this polynomial must exist in the target context (they are
        re-embedded by name).
        """
        if not bindings:
            return self
        targets = {p.ctx for p in bindings.values()}
        if len(targets) != 1:
            raise ContextMismatch("replacement polynomials use more than one context")
        tgt = targets.pop()
        for name in bindings:
            self.ctx.index(name)  # raises for unknown variables
        repl: list[Polynomial] = []
        for name in self.ctx.names:
            if name in bindings:
                repl.append(bindings[name])
            else:
                repl.append(Polynomial.variable(tgt, name))
        out = Polynomial.zero(tgt)
        for mono, c in self.terms.items():
            term = Polynomial.constant(tgt, c)
            for var_i, e in enumerate(mono.exps):
                if e:
                    term = term * repl[var_i] ** e
            out = out + term
        return out

    def embed(self, tgt: VarContext) -> "Polynomial":
        """Re-express this polynomial in a context containing all its variables."""
        idx = [tgt.index(n) for n in self.ctx.names]
        out = {}
        for mono, c in self.terms.items():
            exps = [0] * len(tgt)
            for our_i, e in enumerate(mono.exps):
                if e:
                    exps[idx[our_i]] = e
            out[Monomial(tuple(exps))] = c
        return Polynomial(tgt, out)

    def __repr__(self):
        if not self.terms:
            return "0"
        parts = []
        for mono, c in self.sorted_terms():
            factors = [
                f"{n}^{e}" if e > 1 else n
                for n, e in zip(self.ctx.names, mono.exps)
                if e
            ]
            body = "*".join(factors)
            if not body:
                parts.append(f"{c:.12g}")
            elif c == 1.0:
                parts.append(body)
            elif c == -1.0:
                parts.append(f"-{body}")
            else:
                parts.append(f"{c:.12g}*{body}")
        s = " + ".join(parts)
        return s.replace("+ -", "- ")


class PolyMatrix:
    """Rectangular grid of polynomials sharing one context."""

    __slots__ = ("ctx", "rows")

    def __init__(self, rows: Sequence[Sequence[Polynomial]]):
        rows = tuple(tuple(r) for r in rows)
        if not rows or not rows[0]:
            raise ValueError("PolyMatrix must be non-empty")
        width = len(rows[0])
        ctx = rows[0][0].ctx
        for r in rows:
            if len(r) != width:
                raise ValueError("ragged rows in PolyMatrix")
            for p in r:
                if p.ctx is not ctx:
                    raise ContextMismatch("PolyMatrix entries use different contexts")
        self.ctx = ctx
        self.rows = rows

    @property
    def shape(self) -> tuple[int, int]:
        return (len(self.rows), len(self.rows[0]))

    @property
    def degree(self) -> int:
        return max(p.degree for r in self.rows for p in r)

    def __getitem__(self, ij):
        i, j = ij
        return self.rows[i][j]

    def transpose(self) -> "PolyMatrix":
        r, s = self.shape
        return PolyMatrix([[self.rows[i][j] for i in range(r)] for j in range(s)])

    def matmul(self, other: "PolyMatrix") -> "PolyMatrix":
        r, k = self.shape
        k2, s = other.shape
        if k != k2:
            raise ValueError(f"shape mismatch: {self.shape} @ {other.shape}")
        out = []
        for i in range(r):
            row = []
            for j in range(s):
                acc = Polynomial.zero(self.ctx)
                for t in range(k):
                    acc = acc + self.rows[i][t] * other.rows[t][j]
                row.append(acc)
            out.append(row)
        return PolyMatrix(out)

    def eval(self, point: Sequence[float]) -> np.ndarray:
        r, s = self.shape
        out = np.empty((r, s))
        for i in range(r):
            for j in range(s):
                out[i, j] = self.rows[i][j].eval(point)
        return out

    def is_symmetric(self, tol: float = 0.0) -> bool:
        r, s = self.shape
        if r != s:
            return False
        for i in range(r):
            for j in range(i):
                d = self.rows[i][j] - self.rows[j][i]
                if any(abs(c) > tol for c in d.terms.values()):
                    return False
        return True


# -- bases, Kronecker forms, selectors ---------------------------------------


def monomial_basis(ctx: VarContext, var_names: Sequence[str], d: int) -> list[Monomial]:
    """All monomials in the chosen variables of degree <= d, graded lexicographic.

    The length is C(k+d, d) for k chosen variables.
    """
    if d < 0:
        raise ValueError("degree must be nonnegative")
    idx = ctx.indices(var_names)
    nv = len(ctx)
    out: list[Monomial] = []

    def rec(pos: int, remaining: int, exps: list[int]):
        if pos == len(idx):
            out.append(Monomial(tuple(exps)))
            return
        for e in range(remaining + 1):
            exps[idx[pos]] = e
            rec(pos + 1, remaining - e, exps)
        exps[idx[pos]] = 0

    rec(0, d, [0] * nv)
    out.sort(key=Monomial.sort_key)
    return out


def kron_identity(z: Sequence[Polynomial], r: int) -> PolyMatrix:
    """The (l*r) x r polynomial matrix z (x) I_r."""
    if r < 1 or not z:
        raise ValueError("need r >= 1 and a non-empty vector")
    ctx = z[0].ctx
    zero = Polynomial.zero(ctx)
    rows = []
    for p in z:
        for i in range(r):
            rows.append([p if j == i else zero for j in range(r)])
    return PolyMatrix(rows)


def row_kron_identity(z: Sequence[Polynomial], n: int) -> PolyMatrix:
    """The n x (n*l) polynomial matrix I_n (x) z^T mapping coefficients to dynamics."""
    if n < 1 or not z:
        raise ValueError("need n >= 1 and a non-empty vector")
    ctx = z[0].ctx
    zero = Polynomial.zero(ctx)
    ell = len(z)
    rows = []
    for i in range(n):
        row = [zero] * (n * ell)
        for k, p in enumerate(z):
            row[i * ell + k] = p
        rows.append(row)
    return PolyMatrix(rows)


def selector_matrices(
    z: Sequence[Polynomial], state_names: Sequence[str], input_names: Sequence[str]
) -> tuple[np.ndarray, np.ndarray]:
    """0/1 selectors (T_x, T) with x = T_x z and [x; u] = T z.

    Raises :class:`MissingMonomial` if some state or input variable does not occur
    in ``z`` as a plain monomial entry.
    """
    ctx = z[0].ctx
    ell = len(z)

    def find(name: str) -> int:
        target = Polynomial.variable(ctx, name)
        for k, p in enumerate(z):
            if p == target:
                return k
        raise MissingMonomial(f"template lacks the monomial {name!r}")

    n, m = len(state_names), len(input_names)
    t_x = np.zeros((n, ell))
    t = np.zeros((n + m, ell))
    for i, name in enumerate(state_names):
        k = find(name)
        t_x[i, k] = 1.0
        t[i, k] = 1.0
    for i, name in enumerate(input_names):
        t[n + i, find(name)] = 1.0
    return t_x, t


# -- parser -------------------------------------------------------------------

_TOKEN_KIND = ("num", "ident", "op", "end")


def _tokenize(text: str):
    tokens = []
    line, col = 1, 1
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "\n":
            line += 1
            col = 1
            i += 1
            continue
        if ch in " \t\r":
            i += 1
            col += 1
            continue
        if ch in "+-*^()":
            tokens.append(("op", ch, line, col))
            i += 1
            col += 1
            continue
        if ch.isdigit() or ch == ".":
            j = i
            seen_e = False
            while j < len(text) and (
                text[j].isdigit()
                or text[j] == "."
                or text[j] in "eE"
                or (seen_e and text[j] in "+-" and text[j - 1] in "eE")
            ):
                if text[j] in "eE":
                    seen_e = True
                j += 1
            lit = text[i:j]
            try:
                val = float(lit)
            except ValueError:
                raise ParseError(f"malformed number {lit!r}", line, col)
            tokens.append(("num", val, line, col))
            col += j - i
            i = j
            continue
        if ch.isalpha() or ch == "_":
            j = i
            while j < len(text) and (text[j].isalnum() or text[j] == "_"):
                j += 1
            tokens.append(("ident", text[i:j], line, col))
            col += j - i
            i = j
            continue
        raise ParseError(f"unexpected character {ch!r}", line, col)
    tokens.append(("end", None, line, col))
    return tokens


class _Parser:
    def __init__(self, tokens, ctx: VarContext):
        self.tokens = tokens
        self.pos = 0
        self.ctx = ctx

    def peek(self):
        return self.tokens[self.pos]

    def take(self):
        t = self.tokens[self.pos]
        self.pos += 1
        return t

    def expr(self) -> Polynomial:
        sign = 1.0
        kind, val, line, col = self.peek()
        if kind == "op" and val in "+-":
            self.take()
            sign = -1.0 if val == "-" else 1.0
        p = self.term() * sign
        while True:
            kind, val, line, col = self.peek()
            if kind == "op" and val in "+-":
                self.take()
                q = self.term()
                p = p + q if val == "+" else p - q
            else:
                return p

    def term(self) -> Polynomial:
        p = self.factor()
        while True:
            kind, val, line, col = self.peek()
            if kind == "op" and val == "*":
                self.take()
                p = p * self.factor()
            elif kind in ("num", "ident"):
                raise ParseError(
                    "implicit multiplication is not allowed; write '*' explicitly", line, col
                )
            else:
                return p

    def factor(self) -> Polynomial:
        p = self.primary()
        kind, val, line, col = self.peek()
        if kind == "op" and val == "^":
            self.take()
            kind, val, line, col = self.take()
            if kind != "num" or val != int(val) or val < 0:
                raise ParseError("exponent must be a nonnegative integer", line, col)
            p = p ** int(val)
        return p

    def primary(self) -> Polynomial:
        kind, val, line, col = self.take()
        if kind == "num":
            return Polynomial.constant(self.ctx, val)
        if kind == "ident":
            try:
                return Polynomial.variable(self.ctx, val)
            except KeyError:
                raise ParseError(f"unknown variable {val!r}", line, col)
        if kind == "op" and val == "(":
            p = self.expr()
            kind, val, line, col = self.take()
            if not (kind == "op" and val == ")"):
                raise ParseError("expected ')'", line, col)
            return p
        if kind == "op" and val == "-":
            return -self.primary()
        raise ParseError(f"unexpected token {val!r}", line, col)


def parse_polynomial(text: str, ctx: VarContext) -> Polynomial:
    """Parse a textual polynomial like ``-0.8*x1 + 0.1*x1^2 + u1``.

    ``^`` denotes powers; implicit multiplication is rejected. Errors carry line
    and column positions.
    """
    parser = _Parser(_tokenize(text), ctx)
    p = parser.expr()
    kind, val, line, col = parser.peek()
    if kind != "end":
        raise ParseError(f"trailing input starting at {val!r}", line, col)
    return p


def parse_monomial(text: str, ctx: VarContext) -> Monomial:
    """Parse a template entry that must be a single monomial with coefficient 1."""
    p = parse_polynomial(text, ctx)
    if len(p.terms) != 1:
        raise ParseError(f"{text!r} is not a single monomial", 1, 1)
    (mono, c), = p.terms.items()
    if abs(c - 1.0) > DROP_TOL:
        raise ParseError(f"{text!r} must have coefficient 1", 1, 1)
    return mono


def binomial(n: int, k: int) -> int:
    return math.comb(n, k)
