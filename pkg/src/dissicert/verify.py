"""Dissipativity verification engines and certified l2-gain search.

Every entry point answers the same question: does the system admit a
polynomial storage function certifying the supply-rate inequality on the
operating region?  Four engines are provided, differing in what they know
about the system and in the shape of the certificate.

``verify_model``
    Needs the true dynamics.  Scalar sum-of-squares condition in the system
    variables, polynomial storage of any even degree.
``verify_sb_general``
    Data-driven with a per-sample noise bound.  Polynomial storage of any
    even degree; the condition lives in the system variables plus one
    indeterminate per unknown coefficient and grows quickly with the record
    length, so it suits short records and low degrees.
``verify_sb_quadratic``
    Data-driven with a per-sample noise bound and quadratic storage x'Px.
    Compiles to one matrix sum-of-squares condition in the system variables
    only; the record length adds multipliers, not indeterminates.
``verify_cb``
    Data-driven with one aggregate noise bound over the whole record,
    quadratic storage and quadratic supply rate.  Compiles to a single LMI
    whose size is independent of both the record length and, beyond the
    dictionary, the polynomial degrees.

All engines return a :class:`VerdictCertificate`; a ``Dissipative`` verdict
is issued only after the recovered Gram/PSD witnesses are revalidated
independently of the solver.  On top of the fixed-supply engines,
:func:`gain_bisect`, :func:`model_based_gain` and :func:`data_driven_gain`
search for the smallest certified l2-gain bound.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .polyalg import Monomial, Polynomial, VarContext, monomial_basis, selector_matrices
from .sdp.problem import INFEASIBLE, SdpSolution
from .sosprog import AffExpr, AffPoly, GramCertificate, SosProgram
from .sysdata import (
    ConstraintSet,
    CumulativelyBounded,
    DataSet,
    ModelTemplate,
    NotRepresentable,
    QuadraticallyBounded,
    SeparatelyBounded,
    SystemModel,
    aggregate_noise_form,
    constraint_to_quadratic,
    dual_noise_form,
    sample_noise_forms,
)

DISSIPATIVE = "Dissipative"
INDETERMINATE = "Indeterminate"

FRAMEWORKS = ("sb-general", "sb-quadratic", "cb")

# Relative paddings tried on top of the directly minimized gain before the
# search falls back to bisection.
_DIRECT_PADS = (1e-3, 1e-2, 5e-2)


class DegreeBudgetError(ValueError):
    """The requested degrees would create an intractably large Gram block."""


class NoBoundInRange(RuntimeError):
    """The gain search failed even at the top of the candidate range."""


# ----- supply rates -------------------------------------------------------------


@dataclass(frozen=True)
class SupplyRate:
    """Supply rate s(x, u), as a free polynomial or in quadratic (Q, S, R) form.

    Use the constructors: :meth:`from_poly` for an arbitrary polynomial,
    :meth:`qsr` for s = x'Qx + 2 x'Su + u'Ru, and :meth:`gain` for the
    l2-gain supply s = gamma^2 u'u - x'x.
    """

    kind: str
    poly: Polynomial | None = None
    qmat: np.ndarray | None = None
    smat: np.ndarray | None = None
    rmat: np.ndarray | None = None
    gamma: float | None = None

    @classmethod
    def from_poly(cls, p: Polynomial) -> "SupplyRate":
        return cls(kind="poly", poly=p)

    @classmethod
    def qsr(cls, q, s, r) -> "SupplyRate":
        q = np.atleast_2d(np.asarray(q, dtype=float))
        r = np.atleast_2d(np.asarray(r, dtype=float))
        s = np.asarray(s, dtype=float).reshape(q.shape[0], r.shape[0])
        for name, mat in (("Q", q), ("R", r)):
            if mat.shape[0] != mat.shape[1]:
                raise ValueError(f"{name} must be square, got {mat.shape}")
            if np.max(np.abs(mat - mat.T)) > 1e-10:
                raise ValueError(f"{name} must be symmetric")
        return cls(kind="qsr", qmat=q, smat=s, rmat=r)

    @classmethod
    def gain(cls, gamma: float) -> "SupplyRate":
        gamma = float(gamma)
        if not (gamma >= 0.0):
            raise ValueError(f"gamma must be nonnegative, got {gamma}")
        return cls(kind="gain", gamma=gamma)

    def with_gamma(self, gamma: float) -> "SupplyRate":
        if self.kind != "gain":
            raise ValueError("only gain-form supply rates carry a gamma")
        return SupplyRate.gain(gamma)

    def as_qsr(self, n: int, m: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Quadratic-form data (Q, S, R); fails for free-polynomial supplies."""
        if self.kind == "gain":
            return -np.eye(n), np.zeros((n, m)), self.gamma**2 * np.eye(m)
        if self.kind == "qsr":
            if self.qmat.shape[0] != n or self.rmat.shape[0] != m:
                raise ValueError(
                    f"supply rate sized for ({self.qmat.shape[0]}, {self.rmat.shape[0]}), "
                    f"system has ({n}, {m})"
                )
            return self.qmat, self.smat, self.rmat
        raise ValueError("a general polynomial supply rate has no quadratic form")

    def as_poly(self, ctx: VarContext, state_names, input_names) -> Polynomial:
        if self.kind == "poly":
            return self.poly.embed(ctx)
        n, m = len(state_names), len(input_names)
        q, s, r = self.as_qsr(n, m)
        xs = [Polynomial.variable(ctx, nm) for nm in state_names]
        us = [Polynomial.variable(ctx, nm) for nm in input_names]
        acc = Polynomial.zero(ctx)
        for i in range(n):
            for j in range(n):
                if q[i, j]:
                    acc = acc + xs[i] * xs[j] * q[i, j]
        for i in range(n):
            for j in range(m):
                if s[i, j]:
                    acc = acc + xs[i] * us[j] * (2.0 * s[i, j])
        for i in range(m):
            for j in range(m):
                if r[i, j]:
                    acc = acc + us[i] * us[j] * r[i, j]
        return acc


# ----- options and results ------------------------------------------------------


@dataclass
class VerifyOptions:
    """Knobs shared by all engines.

    Degrees are total degrees and must be even.  ``constraint_multiplier_degree``
    of ``None`` lets the quadratic-storage engine pick, per constraint, the
    smallest even degree that can cover the highest dictionary products.
    ``tau_monomial_degree`` of ``None`` likewise lets the LMI engine offer every
    multiplier monomial whose product with the constraint stays expressible
    over the dictionary; a fixed value caps the candidates at that degree.
    ``max_basis_candidates`` caps the candidate Gram basis before any block is
    built, ``max_gram_size`` caps the blocks actually handed to the solver.
    """

    storage_degree: int = 4
    multiplier_degree: int = 2
    constraint_multiplier_degree: int | None = None
    tau_monomial_degree: int | None = None
    parametrized_storage: bool = False
    solver_tol: float = 1e-8
    feasibility_margin: float = 1e-8
    max_gram_size: int = 1200
    max_basis_candidates: int = 2500
    solver_max_iter: int = 200
    verbose: bool = False

    def __post_init__(self):
        for name in ("storage_degree", "multiplier_degree"):
            v = getattr(self, name)
            if v < 0 or v % 2:
                raise ValueError(f"{name} must be even and nonnegative, got {v}")
        for name in ("constraint_multiplier_degree", "tau_monomial_degree"):
            v = getattr(self, name)
            if v is not None and (v < 0 or v % 2):
                raise ValueError(f"{name} must be even and nonnegative, got {v}")
        if self.solver_tol <= 0 or self.feasibility_margin < 0:
            raise ValueError("tolerances must be positive")


@dataclass
class VerdictCertificate:
    """Outcome of one fixed-supply verification call.

    ``verdict`` is ``"Dissipative"`` only when the solver succeeded and every
    recovered witness passed revalidation (Gram reconstruction residual and
    eigenvalue floor).  Anything else is ``"Indeterminate"``: the condition may
    still hold, this run just produced no certificate.
    """

    verdict: str
    engine: str
    supply: SupplyRate
    storage_poly: Polynomial | None = None
    storage_matrix: np.ndarray | None = None
    storage_min_eig: float = float("nan")
    certificates: list[GramCertificate] = field(default_factory=list)
    solution: SdpSolution | None = None
    message: str = ""
    build_seconds: float = 0.0
    solve_seconds: float = 0.0
    block_sizes: tuple[int, ...] = ()

    @property
    def dissipative(self) -> bool:
        return self.verdict == DISSIPATIVE

    def storage_value(self, x, coeffs=None) -> float:
        """Evaluate the recovered storage function at a state.

        States occupy the leading positions of the certificate's context, so
        inputs (which never appear in the storage) are zero-filled.  For a
        coefficient-parametrized storage pass the coefficient vector as
        ``coeffs``; it fills the trailing positions.
        """
        x = np.asarray(x, dtype=float).ravel()
        if self.storage_poly is not None:
            ctx = self.storage_poly.ctx
            point = np.zeros(len(ctx.names))
            point[: x.size] = x
            if coeffs is not None:
                coeffs = np.asarray(coeffs, dtype=float).ravel()
                point[len(point) - coeffs.size :] = coeffs
            return float(self.storage_poly.eval(point))
        if self.storage_matrix is not None:
            return float(x @ self.storage_matrix @ x)
        raise ValueError("certificate carries no storage function")


@dataclass
class GainResult:
    """Outcome of a gain search: the smallest certified gamma and its certificate."""

    gamma: float
    certificate: VerdictCertificate
    history: list[tuple[float, str]]
    mode: str
    seconds: float


# ----- shared assembly helpers --------------------------------------------------


def _constraint_polys(constraints, ctx: VarContext) -> list[Polynomial]:
    if constraints is None:
        return []
    if isinstance(constraints, ConstraintSet):
        constraints = constraints.polys
    out = []
    for p in constraints:
        if not isinstance(p, Polynomial):
            raise TypeError(f"constraints must be polynomials, got {type(p).__name__}")
        out.append(p.embed(ctx))
    return out


def _coeff_names(count: int, taken: set[str]) -> list[str]:
    base = "a"
    while any(f"{base}{k + 1}" in taken for k in range(count)):
        base += "_"
    return [f"{base}{k + 1}" for k in range(count)]


def _slot(target: AffPoly, mono: Monomial) -> AffExpr:
    e = target.coeffs.get(mono)
    if e is None:
        e = AffExpr({}, 0.0)
        target.coeffs[mono] = e
    return e


def _add_expr_times_poly(target: AffPoly, expr: AffExpr, p: Polynomial, scale: float = 1.0) -> None:
    for mono, c in p.terms.items():
        if c:
            _slot(target, mono).add_scaled(expr, scale * c)


def _compose_into(target: AffPoly, lam: AffPoly, images: Sequence[Polynomial], scale: float) -> None:
    """target += scale * lam with every context variable replaced by its image."""
    cache: dict[Monomial, Polynomial] = {}
    for mono, expr in lam.coeffs.items():
        img = cache.get(mono)
        if img is None:
            img = Polynomial.constant(target.ctx, 1.0)
            for i, e in enumerate(mono.exps):
                if e:
                    img = img * images[i] ** e
            cache[mono] = img
        for m2, c2 in img.terms.items():
            if c2:
                _slot(target, m2).add_scaled(expr, scale * c2)


def _supply_scale(supply: SupplyRate, n: int, m: int) -> float:
    """Magnitude of the largest supply coefficient, floored at one.

    The dissipation inequality is solved for s / scale (storage and
    multipliers absorb the factor), which keeps the semidefinite data O(1)
    even for large gains; the recovered storage is scaled back on extraction.
    """
    if supply.kind == "poly":
        worst = max((abs(c) for c in supply.poly.terms.values()), default=0.0)
        return max(1.0, worst)
    q, s, r = supply.as_qsr(n, m)
    return max(1.0, np.max(np.abs(q)), np.max(np.abs(s), initial=0.0), np.max(np.abs(r)))


def _supply_into(target: AffPoly, supply: SupplyRate, state_names, input_names,
                 g2: AffExpr | None, scale: float = 1.0) -> None:
    """Add the supply rate over ``scale``; with ``g2`` the u'u weight is a variable."""
    ctx = target.ctx
    if g2 is None:
        p = supply.as_poly(ctx, state_names, input_names)
        target.accumulate(AffPoly.from_poly(p), scale=1.0 / scale)
        return
    base = SupplyRate.gain(0.0).as_poly(ctx, state_names, input_names)
    target.accumulate(AffPoly.from_poly(base), scale=1.0 / scale)
    for nm in input_names:
        mono = next(iter((Polynomial.variable(ctx, nm) ** 2).terms))
        _slot(target, mono).add_scaled(g2, 1.0 / scale)


def _mono_poly(ctx: VarContext, mono: Monomial) -> Polynomial:
    p = Polynomial.constant(ctx, 1.0)
    for i, e in enumerate(mono.exps):
        if e:
            p = p * Polynomial.variable(ctx, ctx.names[i]) ** e
    return p


def _coeff_quadratic(qmat: np.ndarray, ctx: VarContext, anames: list[str]) -> Polynomial:
    """[a; 1]' Q [a; 1] as a polynomial in the coefficient indeterminates."""
    aug = [Polynomial.variable(ctx, nm) for nm in anames]
    aug.append(Polynomial.constant(ctx, 1.0))
    acc = Polynomial.zero(ctx)
    k = len(aug)
    for i in range(k):
        for j in range(k):
            c = qmat[i, j]
            if c:
                acc = acc + aug[i] * aug[j] * c
    return acc


def _region_degree(dz: int, pdeg: int, opts: VerifyOptions) -> int:
    if opts.constraint_multiplier_degree is not None:
        return opts.constraint_multiplier_degree
    need = max(0, 2 * dz - pdeg)
    return max(2, 2 * math.ceil(need / 2))


def _guard_candidates(nvars: int, half: int, r: int, opts: VerifyOptions, what: str) -> None:
    cand = math.comb(nvars + half, half) * r
    if cand > opts.max_basis_candidates:
        raise DegreeBudgetError(
            f"{what}: {cand} candidate Gram basis elements exceed the cap of "
            f"{opts.max_basis_candidates}; lower the degrees, shorten the record, "
            "or switch to a framework with a smaller certificate"
        )


def _guard_blocks(prog: SosProgram, opts: VerifyOptions) -> None:
    worst = max(prog.block_sizes, default=0)
    if worst > opts.max_gram_size:
        raise DegreeBudgetError(
            f"largest semidefinite block has side {worst}, over the cap of "
            f"{opts.max_gram_size}; lower the degrees or switch framework"
        )


def _solve_and_finalize(engine: str, supply: SupplyRate, prog: SosProgram, handles: dict,
                        opts: VerifyOptions, t0: float) -> VerdictCertificate:
    build_seconds = time.perf_counter() - t0
    _guard_blocks(prog, opts)
    t1 = time.perf_counter()
    sol = prog.solve(tol=opts.solver_tol, max_iter=opts.solver_max_iter, verbose=opts.verbose)
    solve_seconds = time.perf_counter() - t1

    certs = prog.certificates(sol.y)
    scale = handles.get("scale", 1.0)
    storage_poly = None
    storage_matrix = None
    storage_min_eig = float("nan")
    if handles.get("storage") is not None:
        storage_poly = handles["storage"].value(sol.y) * scale
        for c in certs:
            if c.label == "storage":
                storage_min_eig = c.min_eig * scale
    if handles.get("storage_mat") is not None:
        pm = handles["storage_mat"]
        storage_matrix = np.array([[prog.value(sol.y, e) for e in row] for row in pm])
        storage_matrix = scale * 0.5 * (storage_matrix + storage_matrix.T)
        storage_min_eig = float(np.linalg.eigvalsh(storage_matrix)[0])

    bad = [c for c in certs if not c.ok or c.min_eig < -opts.feasibility_margin]
    if sol.ok and not bad:
        verdict, message = DISSIPATIVE, ""
    elif sol.ok:
        worst = max(bad, key=lambda c: max(c.residual, -c.min_eig))
        verdict = INDETERMINATE
        message = (
            f"solver accepted the problem but witness '{worst.label}' failed revalidation "
            f"(residual {worst.residual:.2e}, min eig {worst.min_eig:.2e})"
        )
    else:
        verdict = INDETERMINATE
        message = f"solver: {sol.status}" + (f" ({sol.message})" if sol.message else "")

    return VerdictCertificate(
        verdict=verdict,
        engine=engine,
        supply=supply,
        storage_poly=storage_poly,
        storage_matrix=storage_matrix,
        storage_min_eig=storage_min_eig,
        certificates=certs,
        solution=sol,
        message=message,
        build_seconds=build_seconds,
        solve_seconds=solve_seconds,
        block_sizes=prog.block_sizes,
    )


# ----- model-based engine -------------------------------------------------------


def _assemble_model(system: SystemModel, constraints, supply: SupplyRate,
                    opts: VerifyOptions, want_g2: bool = False):
    ctx = system.ctx
    polys = _constraint_polys(constraints, ctx)
    names_all = list(ctx.names)
    fdeg = max(p.degree for p in system.f)
    base_deg = max(
        supply.poly.degree if supply.kind == "poly" else 2,
        opts.storage_degree * max(fdeg, 1),
    )
    base_deg += base_deg % 2
    mdegs = []
    for p in polys:
        if opts.constraint_multiplier_degree is not None:
            d = opts.constraint_multiplier_degree
        else:
            # let each region term reach the degree of the certificate, so
            # high-degree storage increments stay dominated on the region
            d = max(opts.multiplier_degree, base_deg - p.degree)
            d += d % 2
        mdegs.append(d)
    psi_deg = max([base_deg] + [p.degree + d for p, d in zip(polys, mdegs)])
    psi_deg += psi_deg % 2
    _guard_candidates(len(names_all), psi_deg // 2, 1, opts, "dissipation certificate")

    prog = SosProgram()
    g2 = prog.add_scalar(nonneg=True, label="gain-sq") if want_g2 else None
    scale = 1.0 if want_g2 else _supply_scale(supply, system.n, system.m)
    lam = prog.add_sos_poly(ctx, system.state_names, opts.storage_degree, label="storage")
    psi = AffPoly.zero(ctx)
    _supply_into(psi, supply, system.state_names, system.input_names, g2, scale)
    psi.accumulate(lam)
    images = list(system.f) + [Polynomial.variable(ctx, nm) for nm in system.input_names]
    _compose_into(psi, lam, images, -1.0)
    for i, p in enumerate(polys):
        s_i = prog.add_sos_poly(ctx, names_all, mdegs[i], label=f"region-mult{i}")
        psi.accumulate(s_i, times=p)
    prog.constrain_sos(psi, label="dissipation")
    return prog, {"g2": g2, "storage": lam, "storage_mat": None, "scale": scale}


def verify_model(system: SystemModel, constraints, supply: SupplyRate,
                 opts: VerifyOptions | None = None) -> VerdictCertificate:
    """Certify dissipativity from the true dynamics.

    Searches for a storage function that is a sum of squares in the states,
    with sum-of-squares multipliers relaxing the region constraints
    (each given as p(x, u) <= 0).
    """
    opts = opts or VerifyOptions()
    t0 = time.perf_counter()
    prog, handles = _assemble_model(system, constraints, supply, opts)
    return _solve_and_finalize("model", supply, prog, handles, opts, t0)


# ----- data-driven engine: per-sample bounds, polynomial storage ----------------


def _assemble_sb_general(template: ModelTemplate, data: DataSet, noise, constraints,
                         supply: SupplyRate, opts: VerifyOptions):
    n, m, ell = template.n, template.m, template.ell
    base_names = list(template.ctx.names)
    anames = _coeff_names(n * ell, set(base_names))
    ctx = VarContext(base_names + anames)
    polys = [p.embed(ctx) for p in _constraint_polys(constraints, template.ctx)]
    dz = max(p.degree for p in template.z)
    psi_deg = max(
        supply.poly.degree if supply.kind == "poly" else 2,
        opts.storage_degree * (dz + 1),
        opts.multiplier_degree + 2,
        max((p.degree for p in polys), default=0) + opts.multiplier_degree,
    )
    psi_deg += psi_deg % 2
    _guard_candidates(len(ctx.names), psi_deg // 2, 1, opts, "dissipation certificate")

    forms = sample_noise_forms(data, template, noise)
    prog = SosProgram()
    if opts.parametrized_storage:
        # Monomials without any state variable cancel identically between
        # lambda(x, a) and lambda(Za, a); dropping them from the Gram basis
        # removes pure recession directions without shrinking the search.
        full = monomial_basis(ctx, list(template.state_names) + anames, opts.storage_degree // 2)
        basis = [mo for mo in full if any(mo.exps[: n]) or mo.degree == 0]
        lam = prog.add_sos_poly(ctx, None, opts.storage_degree, label="storage", basis=basis)
    else:
        lam = prog.add_sos_poly(ctx, template.state_names, opts.storage_degree, label="storage")
    scale = _supply_scale(supply, n, m)
    psi = AffPoly.zero(ctx)
    _supply_into(psi, supply, template.state_names, template.input_names, None, scale)
    psi.accumulate(lam)

    zpolys = [z.embed(ctx) for z in template.z]
    avars = [Polynomial.variable(ctx, nm) for nm in anames]
    images = []
    for i in range(n):
        img = Polynomial.zero(ctx)
        for k in range(ell):
            img = img + zpolys[k] * avars[i * ell + k]
        images.append(img)
    for nm in list(template.input_names) + anames:
        images.append(Polynomial.variable(ctx, nm))
    _compose_into(psi, lam, images, -1.0)

    names_all = list(ctx.names)
    for i, q in enumerate(forms):
        delta = _coeff_quadratic(q, ctx, anames)
        t_i = prog.add_sos_poly(ctx, names_all, opts.multiplier_degree, label=f"noise-mult{i}")
        psi.accumulate(t_i, times=delta)
    for i, p in enumerate(polys):
        s_i = prog.add_sos_poly(ctx, names_all, opts.multiplier_degree, label=f"region-mult{i}")
        psi.accumulate(s_i, times=p)
    prog.constrain_sos(psi, label="dissipation")
    return prog, {"g2": None, "storage": lam, "storage_mat": None, "scale": scale}


def verify_sb_general(template: ModelTemplate, data: DataSet, noise, constraints,
                      supply: SupplyRate, opts: VerifyOptions | None = None) -> VerdictCertificate:
    """Certify dissipativity of every system consistent with per-sample bounds.

    Parameters
    ----------
    template : ModelTemplate
        Dictionary z(x, u); the unknown system is x+ = A z(x, u).
    data : DataSet
        Noisy input-state record.
    noise : SeparatelyBounded or QuadraticallyBounded
        Per-sample disturbance description.
    constraints : sequence of Polynomial or ConstraintSet
        Operating region {p_i(x, u) <= 0}.
    supply : SupplyRate
    opts : VerifyOptions, optional

    The storage function is a polynomial of degree ``storage_degree`` in the
    states (or in states and coefficients with ``parametrized_storage``); one
    sum-of-squares multiplier per sample absorbs the noise description.
    """
    opts = opts or VerifyOptions()
    t0 = time.perf_counter()
    prog, handles = _assemble_sb_general(template, data, noise, constraints, supply, opts)
    return _solve_and_finalize("sb-general", supply, prog, handles, opts, t0)


# ----- data-driven engine: per-sample bounds, quadratic storage -----------------


def _assemble_sb_quadratic(template: ModelTemplate, data: DataSet, noise, constraints,
                           supply: SupplyRate, opts: VerifyOptions, want_g2: bool = False):
    ctx = template.ctx
    n, m, ell = template.n, template.m, template.ell
    r = n * ell + 1
    polys = _constraint_polys(constraints, ctx)
    dz = max(p.degree for p in template.z)
    sdegs = [_region_degree(dz, p.degree, opts) for p in polys]
    entry_deg = max(
        2 * dz,
        supply.poly.degree if supply.kind == "poly" else 2,
        opts.multiplier_degree,
        max((p.degree + d for p, d in zip(polys, sdegs)), default=0),
    )
    entry_deg += entry_deg % 2
    _guard_candidates(n + m, entry_deg // 2, r, opts, "matrix dissipation certificate")

    forms = sample_noise_forms(data, template, noise)
    prog = SosProgram()
    pmat = prog.add_psd_matrix(n, label="storage")
    g2 = prog.add_scalar(nonneg=True, label="gain-sq") if want_g2 else None

    psi: list[list[AffPoly]] = [[None] * r for _ in range(r)]
    for a in range(r):
        for b in range(a, r):
            entry = AffPoly.zero(ctx)
            psi[a][b] = entry
            psi[b][a] = entry

    # blkdiag(-Z' P Z, s + x' P x) with Z the stacked dictionary rows
    zs = template.z
    for a in range(n * ell):
        i, k = divmod(a, ell)
        for b in range(a, n * ell):
            j, l = divmod(b, ell)
            _add_expr_times_poly(psi[a][b], pmat[i][j], zs[k] * zs[l], -1.0)
    corner = psi[r - 1][r - 1]
    scale = 1.0 if want_g2 else _supply_scale(supply, n, m)
    _supply_into(corner, supply, template.state_names, template.input_names, g2, scale)
    xs = [Polynomial.variable(ctx, nm) for nm in template.state_names]
    for i in range(n):
        for j in range(n):
            _add_expr_times_poly(corner, pmat[i][j], xs[i] * xs[j], 1.0)

    names_all = list(ctx.names)
    for idx, q in enumerate(forms):
        t_i = prog.add_sos_poly(ctx, names_all, opts.multiplier_degree, label=f"noise-mult{idx}")
        for a in range(r):
            for b in range(a, r):
                c = q[a, b]
                if c:
                    psi[a][b].accumulate(t_i, scale=c)
    for idx, p in enumerate(polys):
        smat = prog.add_sos_matrix(r, ctx, names_all, sdegs[idx], label=f"region-mult{idx}")
        for a in range(r):
            for b in range(a, r):
                psi[a][b].accumulate(smat[a][b], times=p)

    prog.constrain_sos_matrix(psi, label="dissipation")
    return prog, {"g2": g2, "storage": None, "storage_mat": pmat, "scale": scale}


def verify_sb_quadratic(template: ModelTemplate, data: DataSet, noise, constraints,
                        supply: SupplyRate, opts: VerifyOptions | None = None) -> VerdictCertificate:
    """Certify dissipativity with quadratic storage from per-sample bounds.

    Same data model as :func:`verify_sb_general`, but the storage is fixed to
    x'Px with P >= 0 and the whole condition compiles into one matrix
    sum-of-squares constraint over the system variables.  Each sample
    contributes a scalar multiplier; each region constraint a matrix one,
    whose degree is chosen automatically unless pinned by the options.
    """
    opts = opts or VerifyOptions()
    t0 = time.perf_counter()
    prog, handles = _assemble_sb_quadratic(template, data, noise, constraints, supply, opts)
    return _solve_and_finalize("sb-quadratic", supply, prog, handles, opts, t0)


# ----- data-driven engine: aggregate bound, single LMI --------------------------


def _assemble_cb(template: ModelTemplate, data: DataSet, noise, constraints,
                 supply: SupplyRate, opts: VerifyOptions, want_g2: bool = False):
    ctx = template.ctx
    n, m, ell = template.n, template.m, template.ell
    if supply.kind == "poly":
        raise ValueError("the aggregate-bound framework needs a quadratic supply rate")
    if isinstance(noise, SeparatelyBounded):
        noise = CumulativelyBounded.from_separate(noise, n)
    if not isinstance(noise, CumulativelyBounded):
        raise ValueError(
            "the aggregate-bound framework needs a cumulative (or separate) noise bound, "
            f"got {type(noise).__name__}"
        )
    form = aggregate_noise_form(data, template, noise)
    dual = dual_noise_form(form, ell)
    t_x, t_sel = selector_matrices(template.z, template.state_names, template.input_names)
    polys = _constraint_polys(constraints, ctx)

    prog = SosProgram()
    pmat = prog.add_psd_matrix(n, label="storage")
    tau = prog.add_scalar(nonneg=True, label="noise-mult")
    g2 = prog.add_scalar(nonneg=True, label="gain-sq") if want_g2 else None

    # Index map for the LMI: future state w first, then the dictionary z,
    # then the affine coordinate.
    big = n + ell + 1
    slots = {(i, j): AffExpr({}, 0.0) for i in range(big) for j in range(i, big)}

    def bump(i: int, j: int, term, scale: float = 1.0) -> None:
        if j < i:
            i, j = j, i
        if isinstance(term, AffExpr):
            slots[(i, j)].add_scaled(term, scale)
        else:
            slots[(i, j)].const += float(term) * scale

    # storage: -P on the w block, T_x' P T_x on the z block
    for i in range(n):
        for j in range(i, n):
            bump(i, j, pmat[i][j], -1.0)
    tx_nz = [[(i, t_x[i, a]) for i in range(n) if t_x[i, a]] for a in range(ell)]
    for a in range(ell):
        for b in range(a, ell):
            for i, ca in tx_nz[a]:
                for j, cb in tx_nz[b]:
                    bump(n + a, n + b, pmat[i][j], ca * cb)

    # supply: T' [[Q, S], [S', R]] T on the z block
    t_nz = [[(rr, t_sel[rr, a]) for rr in range(n + m) if t_sel[rr, a]] for a in range(ell)]
    scale = 1.0 if want_g2 else _supply_scale(supply, n, m)
    if g2 is None:
        qq, ss, rr_ = supply.as_qsr(n, m)
        gmat = np.block([[qq, ss], [ss.T, rr_]]) / scale

        def supply_entry(row, col):
            return gmat[row, col]
    else:
        def supply_entry(row, col):
            if row == col:
                return -1.0 if row < n else g2
            return 0.0
    for a in range(ell):
        for b in range(a, ell):
            for row, ca in t_nz[a]:
                for col, cb in t_nz[b]:
                    val = supply_entry(row, col)
                    if isinstance(val, AffExpr):
                        bump(n + a, n + b, val, ca * cb)
                    elif val:
                        bump(n + a, n + b, val * ca * cb)

    # aggregate noise: tau times the dualized form on [z; w]
    for a in range(ell):
        for b in range(a, ell):
            bump(n + a, n + b, tau, dual[a, b])
    for a in range(ell):
        for i in range(n):
            bump(n + a, i, tau, dual[a, ell + i])
    for i in range(n):
        for j in range(i, n):
            bump(i, j, tau, dual[ell + i, ell + j])

    # region constraints: multiplier polynomials mu_i with mu_i * p_i written
    # as a quadratic form over [z; 1]; the kernel of that representation adds
    # free directions shared by all constraints.
    def quad_bump(qform: np.ndarray, coef) -> None:
        for a in range(ell + 1):
            ga = n + a
            for b in range(a, ell + 1):
                c = qform[a, b]
                if c:
                    bump(ga, n + b, coef, c)

    names_all = list(ctx.names)
    dz_max = max(p.degree for p in template.z)
    mults = []
    for idx, p in enumerate(polys):
        if opts.tau_monomial_degree is not None:
            cap = opts.tau_monomial_degree
        else:
            cap = max(2, 2 * dz_max - p.degree)
        cand = monomial_basis(ctx, names_all, cap)
        kept = []
        mu = AffPoly.zero(ctx)
        for mono in cand:
            try:
                g0, _ = constraint_to_quadratic(_mono_poly(ctx, mono) * p, template)
            except NotRepresentable:
                continue
            coef = prog.add_scalar()
            mu.coeffs[mono] = coef
            kept.append((mono, coef, g0))
            quad_bump(g0, coef)
        if kept:
            prog.constrain_sos(mu, label=f"region-mult{idx}")
        mults.append(kept)
    _, kernel = constraint_to_quadratic(Polynomial.zero(ctx), template)
    nus = []
    for kmat in kernel:
        nu = prog.add_scalar()
        nus.append(nu)
        quad_bump(kmat, nu)

    theta = [[slots[(min(i, j), max(i, j))] for j in range(big)] for i in range(big)]
    prog.constrain_psd(theta, label="dissipation-lmi")
    handles = {
        "g2": g2,
        "storage": None,
        "storage_mat": pmat,
        "scale": scale,
        "tau": tau,
        "dual": dual,
        "theta": theta,
        "mults": mults,
        "kernel": (kernel, nus),
        "selectors": (t_x, t_sel),
    }
    return prog, handles


def verify_cb(template: ModelTemplate, data: DataSet, noise, constraints,
              supply: SupplyRate, opts: VerifyOptions | None = None) -> VerdictCertificate:
    """Certify dissipativity from one aggregate noise bound via a single LMI.

    The noise description covers the whole record at once
    (:class:`CumulativelyBounded`, or :class:`SeparatelyBounded` which is
    aggregated automatically), the storage is quadratic and the supply rate
    must be quadratic.  Region constraints enter through multiplier
    polynomials that are rewritable as quadratic forms over the dictionary;
    candidate multiplier monomials that admit no such rewrite are skipped,
    which only makes the test more conservative.

    Raises :class:`~dissicert.sysdata.DataConsistencyError` when the record
    is too poor to dualize the aggregate bound (dictionary rows not rich
    enough), and ``ValueError`` for a free-polynomial supply rate.
    """
    opts = opts or VerifyOptions()
    t0 = time.perf_counter()
    prog, handles = _assemble_cb(template, data, noise, constraints, supply, opts)
    return _solve_and_finalize("cb", supply, prog, handles, opts, t0)


# ----- gain search --------------------------------------------------------------


def _check_range(gamma_range) -> tuple[float, float]:
    lo, hi = (float(v) for v in gamma_range)
    if not (0.0 <= lo < hi) or not math.isfinite(hi):
        raise ValueError(f"need 0 <= gamma_lo < gamma_hi and finite, got ({lo}, {hi})")
    return lo, hi


def gain_bisect(engine: Callable[[float], VerdictCertificate], gamma_range,
                rel_tol: float = 1e-2) -> GainResult:
    """Smallest certified gamma in a range, by bisection on a fixed-gamma engine.

    Probes the top of the range first and raises :class:`NoBoundInRange` when
    even that fails; probes the bottom next and returns it immediately when it
    certifies.  Otherwise bisects (geometrically, falling back to arithmetic
    near zero) until the bracket is within ``rel_tol``.  The returned
    certificate always belongs to the returned gamma.
    """
    if rel_tol <= 0:
        raise ValueError("rel_tol must be positive")
    lo, hi = _check_range(gamma_range)
    t0 = time.perf_counter()
    history: list[tuple[float, str]] = []

    cert = engine(hi)
    history.append((hi, cert.verdict))
    if not cert.dissipative:
        raise NoBoundInRange(
            f"no certificate at the top of the range (gamma = {hi:g}); "
            "widen the range, raise the degrees, or collect more data"
        )
    best_gamma, best_cert = hi, cert

    cert = engine(lo)
    history.append((lo, cert.verdict))
    if cert.dissipative:
        return GainResult(lo, cert, history, "bisect", time.perf_counter() - t0)

    while hi > lo * (1.0 + rel_tol) and hi - lo > 1e-9 * max(1.0, hi):
        mid = math.sqrt(lo * hi) if lo > 1e-9 else 0.5 * (lo + hi)
        cert = engine(mid)
        history.append((mid, cert.verdict))
        if cert.dissipative:
            hi, best_gamma, best_cert = mid, mid, cert
        else:
            lo = mid
    return GainResult(best_gamma, best_cert, history, "bisect", time.perf_counter() - t0)


def _direct_gain(assemble: Callable[[], tuple], engine: Callable[[float], VerdictCertificate],
                 gamma_range, rel_tol: float, opts: VerifyOptions) -> GainResult:
    """Minimize gamma^2 as a decision variable, then revalidate at a padded gamma.

    The minimizing solve only estimates where the optimum sits, so it runs at
    a relaxed tolerance and a capped iteration budget, and its best iterate is
    used even when it stops short of formal convergence (on the larger
    data-driven programs the homogeneous model routinely closes the objective
    gap long before the scaled primal residual settles).  The certificate that
    is ultimately returned always comes from a fixed-gamma call at full
    tolerance.  Falls back to bisection when no padded revalidation certifies.
    """
    t0 = time.perf_counter()
    lo, hi = _check_range(gamma_range)
    history: list[tuple[float, str]] = []
    prog, handles = assemble()
    prog.minimize(handles["g2"])
    _guard_blocks(prog, opts)
    sol = prog.solve(tol=max(opts.solver_tol, 1e-6),
                     max_iter=min(opts.solver_max_iter, 60),
                     verbose=opts.verbose)
    graw = float("nan")
    if sol.status != INFEASIBLE and np.all(np.isfinite(sol.y)):
        graw = math.sqrt(max(prog.value(sol.y, handles["g2"]), 0.0))
    if math.isfinite(graw):
        probed: set = set()
        for pad in _DIRECT_PADS:
            g = min(max(graw * (1.0 + pad), lo), hi)
            if g in probed:
                continue
            probed.add(g)
            cert = engine(g)
            history.append((g, cert.verdict))
            if cert.dissipative:
                return GainResult(g, cert, history, "direct", time.perf_counter() - t0)
    fallback = gain_bisect(engine, (lo, hi), rel_tol=rel_tol)
    return GainResult(fallback.gamma, fallback.certificate, history + fallback.history,
                      "direct+bisect", time.perf_counter() - t0)


def model_based_gain(system: SystemModel, constraints, gamma_range,
                     opts: VerifyOptions | None = None, rel_tol: float = 1e-2,
                     mode: str = "bisect") -> GainResult:
    """Smallest certified l2-gain bound from the true dynamics.

    When no options are given the search uses a quadratic storage function,
    the classical baseline for gain analysis. Higher storage degrees are
    admissible and can only tighten the bound, at the price of a harder
    program; pass explicit options to request them.
    """
    opts = opts or VerifyOptions(storage_degree=2)

    def fixed(g: float) -> VerdictCertificate:
        return verify_model(system, constraints, SupplyRate.gain(g), opts)

    if mode == "direct":
        def assemble():
            return _assemble_model(system, constraints, SupplyRate.gain(0.0), opts, want_g2=True)
        return _direct_gain(assemble, fixed, gamma_range, rel_tol, opts)
    if mode != "bisect":
        raise ValueError(f"unknown mode {mode!r}, expected 'bisect' or 'direct'")
    return gain_bisect(fixed, gamma_range, rel_tol=rel_tol)


def data_driven_gain(framework: str, template: ModelTemplate, data: DataSet, noise,
                     constraints, gamma_range, opts: VerifyOptions | None = None,
                     rel_tol: float = 1e-2, mode: str = "bisect") -> GainResult:
    """Smallest certified l2-gain bound from data.

    ``framework`` selects the engine: ``"sb-general"`` (polynomial storage,
    per-sample bounds), ``"sb-quadratic"`` (quadratic storage, per-sample
    bounds) or ``"cb"`` (quadratic storage, one aggregate bound).  ``mode``
    is ``"bisect"`` or ``"direct"``; the direct route treats gamma^2 as a
    decision variable and is unavailable for ``"sb-general"``.
    """
    opts = opts or VerifyOptions()
    if framework not in FRAMEWORKS:
        raise ValueError(f"unknown framework {framework!r}, expected one of {FRAMEWORKS}")

    def fixed(g: float) -> VerdictCertificate:
        s = SupplyRate.gain(g)
        if framework == "sb-general":
            return verify_sb_general(template, data, noise, constraints, s, opts)
        if framework == "sb-quadratic":
            return verify_sb_quadratic(template, data, noise, constraints, s, opts)
        return verify_cb(template, data, noise, constraints, s, opts)

    if mode == "direct":
        if framework == "sb-general":
            raise ValueError("direct gain search is unavailable for 'sb-general'; use bisection")

        def assemble():
            if framework == "sb-quadratic":
                return _assemble_sb_quadratic(template, data, noise, constraints,
                                              SupplyRate.gain(0.0), opts, want_g2=True)
            return _assemble_cb(template, data, noise, constraints,
                                SupplyRate.gain(0.0), opts, want_g2=True)
        return _direct_gain(assemble, fixed, gamma_range, rel_tol, opts)
    if mode != "bisect":
        raise ValueError(f"unknown mode {mode!r}, expected 'bisect' or 'direct'")
    return gain_bisect(fixed, gamma_range, rel_tol=rel_tol)


# ----- soundness utilities ------------------------------------------------------


def sample_feasible_points(constraints, box, n_points: int, rng=None) -> np.ndarray:
    """Rejection-sample points of the box satisfying every region constraint.

    ``box`` has one (lo, hi) row per variable, in context order.  Raises when
    the acceptance rate is so low that the region looks empty.
    """
    rng = np.random.default_rng(rng)
    box = np.asarray(box, dtype=float)
    polys = list(constraints.polys) if isinstance(constraints, ConstraintSet) else list(constraints)
    dim = box.shape[0]
    out = np.empty((n_points, dim))
    got = 0
    attempts = 0
    while got < n_points:
        attempts += 1
        if attempts > 200 * n_points + 1000:
            raise RuntimeError("rejection sampling failed; the region looks empty in this box")
        pt = rng.uniform(box[:, 0], box[:, 1])
        if all(p.eval(pt) <= 0.0 for p in polys):
            out[got] = pt
            got += 1
    return out


def dissipation_margin(cert: VerdictCertificate, system: SystemModel,
                       points: np.ndarray, coeffs=None) -> np.ndarray:
    """s(x, u) - lambda(f(x, u)) + lambda(x) at each row [x, u] of ``points``.

    Nonnegative (up to solver accuracy) wherever the certificate is sound and
    ``system`` is covered by it; for the data-driven engines that means any
    system consistent with the data.  Pass the coefficient vector as
    ``coeffs`` when the storage is coefficient-parametrized.
    """
    n = system.n
    supply_p = cert.supply.as_poly(system.ctx, system.state_names, system.input_names)
    points = np.atleast_2d(np.asarray(points, dtype=float))
    out = np.empty(points.shape[0])
    for k, row in enumerate(points):
        x = row[:n]
        xp = system.step(x, row[n:])
        out[k] = supply_p.eval(row) - cert.storage_value(xp, coeffs) + cert.storage_value(x, coeffs)
    return out
